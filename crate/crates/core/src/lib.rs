//! Hybrid-reward reinforcement learning with verifiable rewards on a toy
//! featurized policy: task construction, verification, reward shaping,
//! GSPO and DPO optimisation, data curation and the training harness.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod curation;
pub mod harness;
pub mod hashing;
pub mod optim;
pub mod policy;
pub mod reward_engine;
pub mod task_forge;
pub mod verifier;
