//! Stable 64-bit hashing for feature buckets and seed derivation.
//!
//! `std`'s `DefaultHasher` is not guaranteed stable across releases, and
//! checkpoints plus metrics must be reproducible byte for byte.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over `bytes`, starting from `salt` mixed into the offset basis.
pub fn fnv1a64(salt: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET ^ salt.wrapping_mul(FNV_PRIME);
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// SplitMix64 finalizer; spreads low-entropy inputs over all bits.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a root seed, a string key and integer indices.
pub fn derive_seed(root: u64, key: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix(root ^ fnv1a64(0, key.as_bytes()));
    for &i in indices {
        h = splitmix(h ^ i);
    }
    h
}
