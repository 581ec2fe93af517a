//! Featurized linear-softmax autoregressive policy.
//!
//! At each step the next-token distribution is
//! `softmax(W phi(task, prefix) / T)` with `W` of shape `V x F`. Everything
//! is closed form: log-likelihoods are exact and the gradient of a token's
//! log-probability with respect to row `v` of `W` is
//! `(1[v = token] - p_v) * phi / T`.

mod checkpoint;
mod features;
mod vocab;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use features::{FeatureLayout, TaskFeatures};
pub use vocab::{TokenId, Vocab, ABSTAIN_TOKEN, EOS, FILLER_WORDS};

use crate::task_forge::Task;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("invalid policy dimensions V={vocab_size}, F={feature_dim} (need V >= 4, F >= 1)")]
    InvalidDims {
        vocab_size: usize,
        feature_dim: usize,
    },
    #[error("token {token} outside vocabulary of size {vocab_size}")]
    OutOfVocab { token: TokenId, vocab_size: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("word `{0}` is not in the vocabulary")]
    UnknownWord(String),
    #[error(
        "layout expects V={layout_v}, F={layout_f}; parameters have V={params_v}, F={params_f}"
    )]
    ShapeMismatch {
        layout_v: usize,
        layout_f: usize,
        params_v: usize,
        params_f: usize,
    },
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error(
        "token {token} at position {position} is not an answer, but the answer budget requires one"
    )]
    BudgetViolation { token: TokenId, position: usize },
}

/// Policy weights plus the mask of entries that updates must not touch.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab_size: usize,
    feature_dim: usize,
    weights: Vec<f64>,
    frozen_mask: Vec<bool>,
    version: u64,
}

impl PolicyParams {
    pub fn zeros(vocab_size: usize, feature_dim: usize) -> Result<Self, PolicyError> {
        if vocab_size < 4 || feature_dim < 1 {
            return Err(PolicyError::InvalidDims {
                vocab_size,
                feature_dim,
            });
        }
        Ok(Self {
            vocab_size,
            feature_dim,
            weights: vec![0.0; vocab_size * feature_dim],
            frozen_mask: vec![false; vocab_size * feature_dim],
            version: 0,
        })
    }

    pub(crate) fn from_parts(
        vocab_size: usize,
        feature_dim: usize,
        version: u64,
        weights: Vec<f64>,
        frozen_mask: Vec<bool>,
    ) -> Self {
        Self {
            vocab_size,
            feature_dim,
            weights,
            frozen_mask,
            version,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn frozen_mask(&self) -> &[bool] {
        &self.frozen_mask
    }

    pub fn index(&self, token: usize, feature: usize) -> usize {
        token * self.feature_dim + feature
    }

    pub fn weight(&self, token: usize, feature: usize) -> f64 {
        self.weights[self.index(token, feature)]
    }

    /// Direct write access; bypasses the frozen mask. For initialisation and tests.
    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn set_weight(&mut self, token: usize, feature: usize, value: f64) {
        let i = self.index(token, feature);
        self.weights[i] = value;
    }

    /// Freezes every token's weights on the given feature columns.
    pub fn freeze_columns(&mut self, columns: std::ops::Range<usize>) {
        for v in 0..self.vocab_size {
            for f in columns.clone() {
                let i = self.index(v, f);
                self.frozen_mask[i] = true;
            }
        }
    }

    pub fn is_frozen(&self, flat_index: usize) -> bool {
        self.frozen_mask[flat_index]
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    /// Value copy serving as the old policy; later updates never reach it.
    pub fn snapshot(&self) -> PolicyParams {
        self.clone()
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }
}

/// Weights drawn uniformly from `[-0.01, 0.01]`, nothing frozen.
pub fn init_policy(
    vocab_size: usize,
    feature_dim: usize,
    seed: u64,
) -> Result<PolicyParams, PolicyError> {
    let mut params = PolicyParams::zeros(vocab_size, feature_dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for w in params.weights.iter_mut() {
        *w = rng.random_range(-0.01..=0.01);
    }
    Ok(params)
}

/// Dense `V x F` gradient buffer, row-major like the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub values: Vec<f64>,
}

impl Gradient {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Self {
            vocab_size: params.vocab_size,
            feature_dim: params.feature_dim,
            values: vec![0.0; params.weights.len()],
        }
    }

    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// One sampled response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub task_id: String,
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub length: usize,
    pub logprob_old: f64,
    pub logprob_cur: f64,
    pub truncated_by_redundancy: bool,
}

/// Stop generation once the trailing `window` tokens have repeated
/// back-to-back `max_repeats` times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RedundancyConfig {
    pub window: usize,
    pub max_repeats: usize,
}

impl Default for RedundancyConfig {
    fn default() -> Self {
        Self {
            window: 8,
            max_repeats: 4,
        }
    }
}

impl RedundancyConfig {
    pub fn triggers(&self, tokens: &[TokenId]) -> bool {
        if self.window == 0 || self.max_repeats < 2 {
            return false;
        }
        let span = self.window * self.max_repeats;
        if tokens.len() < span {
            return false;
        }
        let tail = &tokens[tokens.len() - span..];
        let first = &tail[..self.window];
        tail.chunks(self.window).all(|c| c == first)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleOptions {
    pub max_len: usize,
    pub temperature: f64,
    pub redundancy: Option<RedundancyConfig>,
    /// End the response at its first answer or abstention token.
    pub stop_at_answer: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            max_len: 16,
            temperature: 1.0,
            redundancy: Some(RedundancyConfig::default()),
            stop_at_answer: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogProb {
    pub total: f64,
    pub per_token: Vec<f64>,
}

/// The fixed architecture: vocabulary and feature layout. Parameters are
/// passed separately so the same model can score under old and new weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub vocab: Vocab,
    pub layout: FeatureLayout,
    /// When set, the token at this 1-based position must be an answer or
    /// an abstention, so a response cannot run out of budget unanswered.
    pub answer_budget: Option<usize>,
}

fn log_softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter_mut().for_each(|z| *z -= lse);
}

impl Model {
    pub fn new(n_answers: u32, prompt_buckets: usize, context_buckets: usize) -> Self {
        let vocab = Vocab::new(n_answers);
        let layout = FeatureLayout {
            vocab_size: vocab.len(),
            prompt_buckets,
            context_buckets,
        };
        Self {
            vocab,
            layout,
            answer_budget: None,
        }
    }

    pub fn with_answer_budget(mut self, budget: Option<usize>) -> Self {
        self.answer_budget = budget.filter(|&b| b > 0);
        self
    }

    fn forced(&self, position: usize) -> bool {
        self.answer_budget == Some(position + 1)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn init_params(&self, seed: u64) -> Result<PolicyParams, PolicyError> {
        init_policy(self.vocab_size(), self.feature_dim(), seed)
    }

    pub fn check_params(&self, params: &PolicyParams) -> Result<(), PolicyError> {
        if params.vocab_size != self.vocab_size() || params.feature_dim != self.feature_dim() {
            return Err(PolicyError::ShapeMismatch {
                layout_v: self.vocab_size(),
                layout_f: self.feature_dim(),
                params_v: params.vocab_size,
                params_f: params.feature_dim,
            });
        }
        Ok(())
    }

    pub fn featurize(&self, task: &Task, prefix: &[TokenId]) -> Vec<f64> {
        self.layout.featurize(task, prefix)
    }

    /// Log-probabilities of every next token at one step (0-based `position`).
    fn step_log_probs(
        &self,
        params: &PolicyParams,
        feats: &TaskFeatures,
        last: Option<TokenId>,
        position: usize,
        temperature: f64,
    ) -> Vec<f64> {
        let f = params.feature_dim;
        let forced = self.forced(position);
        let mut logits: Vec<f64> = (0..params.vocab_size)
            .map(|v| {
                if forced && !self.vocab.is_final(v as TokenId) {
                    return f64::NEG_INFINITY;
                }
                let row = &params.weights[v * f..(v + 1) * f];
                feats.step(last).map(|(j, x)| row[j] * x).sum::<f64>() / temperature
            })
            .collect();
        log_softmax_in_place(&mut logits);
        logits
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), PolicyError> {
        if tokens.is_empty() {
            return Err(PolicyError::EmptySequence);
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.vocab_size()) {
            return Err(PolicyError::OutOfVocab {
                token: bad,
                vocab_size: self.vocab_size(),
            });
        }
        if let Some(b) = self.answer_budget {
            if let Some(&t) = tokens.get(b - 1) {
                if !self.vocab.is_final(t) {
                    return Err(PolicyError::BudgetViolation {
                        token: t,
                        position: b,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn logprob(
        &self,
        params: &PolicyParams,
        task: &Task,
        tokens: &[TokenId],
    ) -> Result<LogProb, PolicyError> {
        self.logprob_at(params, task, tokens, 1.0)
    }

    pub fn logprob_at(
        &self,
        params: &PolicyParams,
        task: &Task,
        tokens: &[TokenId],
        temperature: f64,
    ) -> Result<LogProb, PolicyError> {
        self.check_params(params)?;
        self.check_tokens(tokens)?;
        check_temperature(temperature)?;
        let feats = self.layout.task_features(task);
        let mut last = None;
        let per_token: Vec<f64> = tokens
            .iter()
            .enumerate()
            .map(|(pos, &t)| {
                let lp = self.step_log_probs(params, &feats, last, pos, temperature)[t as usize];
                last = Some(t);
                lp
            })
            .collect();
        Ok(LogProb {
            total: per_token.iter().sum(),
            per_token,
        })
    }

    /// Gradient of the sequence log-likelihood with respect to the weights.
    pub fn grad_logprob(
        &self,
        params: &PolicyParams,
        task: &Task,
        tokens: &[TokenId],
    ) -> Result<Gradient, PolicyError> {
        let mut grad = Gradient::zeros_like(params);
        self.accumulate_grad_logprob(params, task, tokens, 1.0, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// Adds `scale * d log p(tokens) / dW` into `grad`; returns the log-likelihood.
    pub fn accumulate_grad_logprob(
        &self,
        params: &PolicyParams,
        task: &Task,
        tokens: &[TokenId],
        temperature: f64,
        scale: f64,
        grad: &mut Gradient,
    ) -> Result<f64, PolicyError> {
        self.check_params(params)?;
        self.check_tokens(tokens)?;
        check_temperature(temperature)?;
        let f = params.feature_dim;
        let feats = self.layout.task_features(task);
        let mut last = None;
        let mut total = 0.0;
        for (pos, &t) in tokens.iter().enumerate() {
            let lp = self.step_log_probs(params, &feats, last, pos, temperature);
            total += lp[t as usize];
            for (v, &l) in lp.iter().enumerate() {
                let indicator = if v == t as usize { 1.0 } else { 0.0 };
                let coef = scale * (indicator - l.exp()) / temperature;
                if coef == 0.0 {
                    continue;
                }
                let row = &mut grad.values[v * f..(v + 1) * f];
                for (j, x) in feats.step(last) {
                    row[j] += coef * x;
                }
            }
            last = Some(t);
        }
        Ok(total)
    }

    fn generate(
        &self,
        params: &PolicyParams,
        task: &Task,
        opts: &SampleOptions,
        mut choose: impl FnMut(&[f64]) -> TokenId,
    ) -> Rollout {
        let feats = self.layout.task_features(task);
        let mut tokens = Vec::with_capacity(opts.max_len.min(1024));
        let mut logprob = 0.0;
        let mut truncated = false;
        while tokens.len() < opts.max_len.max(1) {
            let lp = self.step_log_probs(
                params,
                &feats,
                tokens.last().copied(),
                tokens.len(),
                opts.temperature,
            );
            let t = choose(&lp);
            logprob += lp[t as usize];
            tokens.push(t);
            if t == EOS || (opts.stop_at_answer && self.vocab.is_final(t)) {
                break;
            }
            if opts.redundancy.is_some_and(|r| r.triggers(&tokens)) {
                truncated = true;
                break;
            }
        }
        Rollout {
            task_id: task.id.clone(),
            text: self.vocab.render(&tokens),
            length: tokens.len(),
            tokens,
            logprob_old: logprob,
            logprob_cur: logprob,
            truncated_by_redundancy: truncated,
        }
    }

    /// Ancestral sampling from the tempered policy. `logprob_cur` and
    /// `logprob_old` both hold the log-likelihood at the sampling temperature.
    pub fn sample(
        &self,
        params: &PolicyParams,
        task: &Task,
        opts: &SampleOptions,
        seed: u64,
    ) -> Result<Rollout, PolicyError> {
        self.check_params(params)?;
        check_temperature(opts.temperature)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self.generate(params, task, opts, |lp| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (v, l) in lp.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    return v as TokenId;
                }
            }
            // Rounding left the cumulative sum just below u.
            lp.iter()
                .enumerate()
                .rev()
                .find(|(_, l)| l.is_finite())
                .map_or(EOS, |(v, _)| v as TokenId)
        }))
    }

    /// Argmax decoding (lowest token id wins ties); log-likelihood at
    /// temperature 1 whatever `opts.temperature` says.
    pub fn greedy(
        &self,
        params: &PolicyParams,
        task: &Task,
        opts: &SampleOptions,
    ) -> Result<Rollout, PolicyError> {
        self.check_params(params)?;
        let opts = SampleOptions {
            temperature: 1.0,
            ..*opts
        };
        Ok(self.generate(params, task, &opts, |lp| {
            let mut best = 0;
            for (v, l) in lp.iter().enumerate() {
                if *l > lp[best] {
                    best = v;
                }
            }
            best as TokenId
        }))
    }

    /// Probability of each next token after `prefix`, at temperature 1.
    pub fn next_token_probs(
        &self,
        params: &PolicyParams,
        task: &Task,
        prefix: &[TokenId],
    ) -> Vec<f64> {
        let feats = self.layout.task_features(task);
        self.step_log_probs(params, &feats, prefix.last().copied(), prefix.len(), 1.0)
            .into_iter()
            .map(f64::exp)
            .collect()
    }
}

fn check_temperature(t: f64) -> Result<(), PolicyError> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(PolicyError::InvalidTemperature(t))
    }
}
