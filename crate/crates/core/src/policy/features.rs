//! Sparse feature map `phi(task, prefix)`.
//!
//! Layout of the `F`-dimensional vector, in order:
//!
//! | block          | width               | active entries                          |
//! |----------------|---------------------|-----------------------------------------|
//! | prompt hash    | `prompt_buckets`    | task identity (3.0), prompt words (0.3) |
//! | context hash   | `context_buckets`   | context words (0.3)                     |
//! | last token     | `vocab_size + 1`    | one-hot of last token, last slot = BOS  |
//! | context flag   | 1                   | 1.0 when evidence is present            |
//! | bias           | 1                   | always 1.0                              |
//!
//! The task identity is the hash of prompt and context together, which lets a
//! linear policy memorise per-task answers. Its larger weight gives the
//! per-task direction a higher effective step size than the shared entries.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::vocab::TokenId;
use crate::hashing::fnv1a64;
use crate::task_forge::Task;

const IDENTITY_SALT: u64 = 0x1d;
const PROMPT_WORD_SALT: u64 = 0x2b;
const CONTEXT_WORD_SALT: u64 = 0x3f;
pub const IDENTITY_WEIGHT: f64 = 3.0;
pub const WORD_WEIGHT: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureLayout {
    pub vocab_size: usize,
    pub prompt_buckets: usize,
    pub context_buckets: usize,
}

impl FeatureLayout {
    pub fn dim(&self) -> usize {
        self.prompt_buckets + self.context_buckets + self.vocab_size + 3
    }

    pub fn prompt_block(&self) -> Range<usize> {
        0..self.prompt_buckets
    }

    /// Columns fed by the evidence text; the frozen "perception" block.
    pub fn context_block(&self) -> Range<usize> {
        self.prompt_buckets..self.prompt_buckets + self.context_buckets
    }

    fn last_token_offset(&self) -> usize {
        self.prompt_buckets + self.context_buckets
    }

    pub fn bos_index(&self) -> usize {
        self.last_token_offset() + self.vocab_size
    }

    pub fn last_token_index(&self, token: Option<TokenId>) -> usize {
        match token {
            Some(t) => self.last_token_offset() + t as usize,
            None => self.bos_index(),
        }
    }

    pub fn context_flag_index(&self) -> usize {
        self.bos_index() + 1
    }

    pub fn bias_index(&self) -> usize {
        self.bos_index() + 2
    }

    pub fn identity_bucket(&self, task: &Task) -> usize {
        let mut bytes = task.prompt.as_bytes().to_vec();
        bytes.push(0x1f);
        if let Some(ctx) = &task.context {
            bytes.extend_from_slice(ctx.as_bytes());
        }
        (fnv1a64(IDENTITY_SALT, &bytes) % self.prompt_buckets as u64) as usize
    }

    /// Task-dependent part of the features, shared by every decoding step.
    pub fn task_features(&self, task: &Task) -> TaskFeatures {
        let mut entries = Vec::new();
        if self.prompt_buckets > 0 {
            entries.push((self.identity_bucket(task), IDENTITY_WEIGHT));
            for w in words(&task.prompt) {
                let b = fnv1a64(PROMPT_WORD_SALT, w.as_bytes()) % self.prompt_buckets as u64;
                entries.push((b as usize, WORD_WEIGHT));
            }
        }
        if let Some(ctx) = &task.context {
            if self.context_buckets > 0 {
                for w in words(ctx) {
                    let b = fnv1a64(CONTEXT_WORD_SALT, w.as_bytes()) % self.context_buckets as u64;
                    entries.push((self.prompt_buckets + b as usize, WORD_WEIGHT));
                }
            }
            entries.push((self.context_flag_index(), 1.0));
        }
        entries.sort_by_key(|e| e.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
        for (i, x) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == i => last.1 += x,
                _ => merged.push((i, x)),
            }
        }
        TaskFeatures {
            entries: merged,
            layout: *self,
        }
    }

    /// Dense feature vector for `task` after `prefix` has been generated.
    pub fn featurize(&self, task: &Task, prefix: &[TokenId]) -> Vec<f64> {
        let mut dense = vec![0.0; self.dim()];
        self.task_features(task)
            .step(prefix.last().copied())
            .for_each(|(i, x)| dense[i] += x);
        dense
    }
}

/// Distinct lowercased alphanumeric words.
fn words(text: &str) -> Vec<String> {
    let mut out: Vec<String> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    out.sort();
    out.dedup();
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskFeatures {
    entries: Vec<(usize, f64)>,
    layout: FeatureLayout,
}

impl TaskFeatures {
    /// Sparse features at one step: task entries, last-token one-hot, bias.
    pub fn step(&self, last: Option<TokenId>) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries.iter().copied().chain([
            (self.layout.last_token_index(last), 1.0),
            (self.layout.bias_index(), 1.0),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task_forge::{gen_arith_tasks, gen_context_tasks};

    fn layout() -> FeatureLayout {
        FeatureLayout {
            vocab_size: 25,
            prompt_buckets: 4096,
            context_buckets: 64,
        }
    }

    #[test]
    fn empty_prefix_uses_bos() {
        let l = layout();
        let task = &gen_arith_tasks(1, 10, 0).unwrap()[0];
        let phi = l.featurize(task, &[]);
        assert_eq!(phi.len(), l.dim());
        assert_eq!(phi[l.bos_index()], 1.0);
        assert_eq!(phi[l.bias_index()], 1.0);
        let after = l.featurize(task, &[3]);
        assert_eq!(after[l.bos_index()], 0.0);
        assert_eq!(after[l.last_token_index(Some(3))], 1.0);
        assert_eq!(l.featurize(task, &[3]), after);
    }

    #[test]
    fn context_flag_and_block() {
        let l = layout();
        let task = &gen_context_tasks(1, 10, 0.0, 0).unwrap()[0];
        let phi = l.featurize(task, &[]);
        assert_eq!(phi[l.context_flag_index()], 1.0);
        assert!(phi[l.context_block()].iter().any(|&x| x > 0.0));
        let plain = &gen_arith_tasks(1, 10, 0).unwrap()[0];
        let phi = l.featurize(plain, &[]);
        assert_eq!(phi[l.context_flag_index()], 0.0);
        assert!(phi[l.context_block()].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_collisions_bounded_by_hash_width() {
        let l = layout();
        let mut tasks = gen_arith_tasks(300, 10, 5).unwrap();
        tasks.sort_by(|a, b| a.prompt.cmp(&b.prompt));
        tasks.dedup_by(|a, b| a.prompt == b.prompt);
        let n = tasks.len();
        let mut buckets: Vec<usize> = tasks.iter().map(|t| l.identity_bucket(t)).collect();
        buckets.sort_unstable();
        let colliding_pairs: usize = buckets
            .chunk_by(|a, b| a == b)
            .map(|c| c.len() * (c.len() - 1) / 2)
            .sum();
        // Expected pairs under uniform hashing: C(n, 2) / H.
        let expected = (n * (n - 1) / 2) as f64 / l.prompt_buckets as f64;
        assert!(
            (colliding_pairs as f64) <= 3.0 * expected + 3.0,
            "{colliding_pairs} collisions vs expected {expected:.2}"
        );
        for i in 0..n {
            for j in i + 1..n {
                if l.identity_bucket(&tasks[i]) == l.identity_bucket(&tasks[j]) {
                    continue;
                }
                assert_ne!(
                    l.featurize(&tasks[i], &[])[l.prompt_block()],
                    l.featurize(&tasks[j], &[])[l.prompt_block()]
                );
            }
        }
    }
}
