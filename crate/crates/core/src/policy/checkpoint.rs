//! Flat binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! u64 vocab_size | u64 feature_dim | u64 version
//! f64 x (V * F)  row-major weights
//! u8  x ceil(V * F / 8)  frozen bitmask, LSB first, unused high bits zero
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::PolicyParams;

const HEADER_LEN: usize = 24;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint truncated or oversized: expected {expected} bytes, got {got}")]
    Length { expected: usize, got: usize },
    #[error("checkpoint header too short ({0} bytes)")]
    Header(usize),
    #[error("checkpoint dimensions V={0}, F={1} are invalid")]
    Dims(u64, u64),
    #[error("non-finite weight at index {0}")]
    NonFinite(usize),
    #[error("frozen bitmask has padding bits set")]
    Padding,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PolicyParams {
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.weights.len();
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * n + n.div_ceil(8));
        out.extend_from_slice(&(self.vocab_size as u64).to_le_bytes());
        out.extend_from_slice(&(self.feature_dim as u64).to_le_bytes());
        out.extend_from_slice(&self.version.to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        let mut mask = vec![0u8; n.div_ceil(8)];
        for (i, &frozen) in self.frozen_mask.iter().enumerate() {
            if frozen {
                mask[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&mask);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < HEADER_LEN {
            return Err(CheckpointError::Header(bytes.len()));
        }
        let word = |i: usize| {
            u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().expect("8-byte slice"))
        };
        let (v, f, version) = (word(0), word(1), word(2));
        if v < 4 || f < 1 {
            return Err(CheckpointError::Dims(v, f));
        }
        let n = usize::try_from(v)
            .ok()
            .zip(usize::try_from(f).ok())
            .and_then(|(v, f)| v.checked_mul(f))
            .ok_or(CheckpointError::Dims(v, f))?;
        let expected = n
            .checked_mul(8)
            .and_then(|w| w.checked_add(HEADER_LEN + n.div_ceil(8)))
            .ok_or(CheckpointError::Dims(v, f))?;
        if bytes.len() != expected {
            return Err(CheckpointError::Length {
                expected,
                got: bytes.len(),
            });
        }
        let body = &bytes[HEADER_LEN..HEADER_LEN + 8 * n];
        let weights: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(CheckpointError::NonFinite(i));
        }
        let mask = &bytes[HEADER_LEN + 8 * n..];
        if n % 8 != 0 && mask[n / 8] >> (n % 8) != 0 {
            return Err(CheckpointError::Padding);
        }
        let frozen_mask = (0..n).map(|i| mask[i / 8] >> (i % 8) & 1 == 1).collect();
        Ok(PolicyParams::from_parts(
            v as usize,
            f as usize,
            version,
            weights,
            frozen_mask,
        ))
    }
}

pub fn save_checkpoint(params: &PolicyParams, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, params.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams, CheckpointError> {
    PolicyParams::from_bytes(&fs::read(path)?)
}
