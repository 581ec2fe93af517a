//! Losses, their analytic gradients, and the parameter update.
//!
//! GSPO uses the length-normalised sequence ratio
//! `s_i = exp((log pi(y_i) - log pi_old(y_i)) / |y_i|)` inside a clipped
//! surrogate with separate lower and upper bounds. The clipped branch is a
//! constant and carries no gradient. There is no KL term.
//!
//! DPO is the reference-free logistic loss on the log-likelihood margin
//! `-log sigmoid(beta * (log pi(y_w) - log pi(y_l)))`.

use rand::seq::index;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{Gradient, Model, PolicyError, PolicyParams, TokenId};
use crate::reward_engine::RolloutGroup;
use crate::task_forge::Task;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("group `{task_id}` has {rollouts} rollouts but {advantages} advantages")]
    AdvantageMismatch {
        task_id: String,
        rollouts: usize,
        advantages: usize,
    },
    #[error("non-finite advantage in group `{0}`")]
    NonFiniteAdvantage(String),
    #[error("gradient shape {grad:?} does not match parameters {params:?}")]
    Shape {
        grad: (usize, usize),
        params: (usize, usize),
    },
    #[error("gradient has {count} non-finite entries (first at index {first}, value {value})")]
    NonFiniteGradient {
        count: usize,
        first: usize,
        value: f64,
    },
    #[error("no preference pairs")]
    EmptyPairs,
    #[error("invalid optimiser config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.28,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if self.eps_low > 0.0 && self.eps_high > 0.0 && self.eps_low < 1.0 {
            Ok(())
        } else {
            Err(OptimError::Config(format!(
                "need 0 < eps_low < 1 and eps_high > 0, got {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_grad_norm: f64,
    /// DPO temperature.
    pub beta: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            max_grad_norm: 5.0,
            beta: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.learning_rate > 0.0) {
            return Err(OptimError::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(OptimError::Config("momentum must be in [0, 1)".into()));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(OptimError::Config("max_grad_norm must be > 0".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(OptimError::Config("beta must be >= 0".into()));
        }
        Ok(())
    }
}

/// One group's contribution to a GSPO batch.
#[derive(Debug, Clone, Copy)]
pub struct GspoGroup<'a> {
    pub task: &'a Task,
    pub group: &'a RolloutGroup,
    pub advantages: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct GspoOutput {
    pub loss: f64,
    pub grad: Gradient,
    /// Fraction of responses whose clipped branch was selected.
    pub clip_fraction: f64,
    pub mean_ratio: f64,
}

struct GroupTerms {
    loss: f64,
    grad: Gradient,
    clipped: usize,
    ratio_sum: f64,
}

fn gspo_group(
    model: &Model,
    params: &PolicyParams,
    item: &GspoGroup<'_>,
    clip: &ClipConfig,
    temperature: f64,
    n_groups: usize,
) -> Result<GroupTerms, OptimError> {
    let n = item.group.n_rollout();
    let weight = 1.0 / (n as f64 * n_groups as f64);
    let mut terms = GroupTerms {
        loss: 0.0,
        grad: Gradient::zeros_like(params),
        clipped: 0,
        ratio_sum: 0.0,
    };
    for (rollout, &adv) in item.group.rollouts.iter().zip(item.advantages) {
        let len = rollout.tokens.len() as f64;
        let cur = model
            .logprob_at(params, item.task, &rollout.tokens, temperature)?
            .total;
        let ratio = ((cur - rollout.logprob_old) / len).exp();
        terms.ratio_sum += ratio;
        if adv == 0.0 {
            continue;
        }
        let bounded = ratio.clamp(1.0 - clip.eps_low, 1.0 + clip.eps_high);
        if bounded * adv < ratio * adv {
            terms.loss -= weight * bounded * adv;
            terms.clipped += 1;
        } else {
            terms.loss -= weight * ratio * adv;
            // d(ratio)/dW = ratio / |y| * d log pi(y) / dW
            let scale = -weight * adv * ratio / len;
            model.accumulate_grad_logprob(
                params,
                item.task,
                &rollout.tokens,
                temperature,
                scale,
                &mut terms.grad,
            )?;
        }
    }
    Ok(terms)
}

/// GSPO loss (negated objective) and its gradient for a batch of groups.
///
/// Groups are evaluated in parallel and reduced in index order, so the
/// result does not depend on the thread count.
pub fn gspo_loss_grad(
    model: &Model,
    params: &PolicyParams,
    batch: &[GspoGroup<'_>],
    clip: &ClipConfig,
    temperature: f64,
) -> Result<GspoOutput, OptimError> {
    for item in batch {
        if item.advantages.len() != item.group.n_rollout() {
            return Err(OptimError::AdvantageMismatch {
                task_id: item.group.task_id.clone(),
                rollouts: item.group.n_rollout(),
                advantages: item.advantages.len(),
            });
        }
        if item.advantages.iter().any(|a| !a.is_finite()) {
            return Err(OptimError::NonFiniteAdvantage(item.group.task_id.clone()));
        }
    }
    let n_groups = batch.len();
    let parts: Vec<GroupTerms> = batch
        .par_iter()
        .map(|item| gspo_group(model, params, item, clip, temperature, n_groups))
        .collect::<Result<_, _>>()?;

    let mut out = GspoOutput {
        loss: 0.0,
        grad: Gradient::zeros_like(params),
        clip_fraction: 0.0,
        mean_ratio: 0.0,
    };
    let mut responses = 0usize;
    for (part, item) in parts.iter().zip(batch) {
        out.loss += part.loss;
        out.grad.add_scaled(&part.grad, 1.0);
        out.clip_fraction += part.clipped as f64;
        out.mean_ratio += part.ratio_sum;
        responses += item.group.n_rollout();
    }
    if responses > 0 {
        out.clip_fraction /= responses as f64;
        out.mean_ratio /= responses as f64;
    }
    Ok(out)
}

/// A preference pair already mapped to token sequences.
#[derive(Debug, Clone)]
pub struct TokenizedPair<'a> {
    pub task: &'a Task,
    pub chosen: Vec<TokenId>,
    pub rejected: Vec<TokenId>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-log sigmoid(beta * margin)` for a single log-likelihood margin.
pub fn dpo_pair_loss(beta: f64, logp_chosen: f64, logp_rejected: f64) -> f64 {
    softplus(-beta * (logp_chosen - logp_rejected))
}

#[derive(Debug, Clone)]
pub struct DpoOutput {
    pub loss: f64,
    pub grad: Gradient,
    /// Fraction of pairs with `log pi(y_w) > log pi(y_l)` before the step.
    pub preference_accuracy: f64,
}

pub fn dpo_loss_grad(
    model: &Model,
    params: &PolicyParams,
    pairs: &[TokenizedPair<'_>],
    beta: f64,
) -> Result<DpoOutput, OptimError> {
    if pairs.is_empty() {
        return Err(OptimError::EmptyPairs);
    }
    let n = pairs.len() as f64;
    let parts: Vec<(f64, bool, Gradient)> = pairs
        .par_iter()
        .map(|pair| {
            let lw = model.logprob(params, pair.task, &pair.chosen)?.total;
            let ll = model.logprob(params, pair.task, &pair.rejected)?.total;
            let margin = lw - ll;
            let mut grad = Gradient::zeros_like(params);
            // d/dW softplus(-beta m) = -beta * sigmoid(-beta m) * dm/dW
            let coef = -beta * sigmoid(-beta * margin) / n;
            if coef != 0.0 {
                model.accumulate_grad_logprob(
                    params,
                    pair.task,
                    &pair.chosen,
                    1.0,
                    coef,
                    &mut grad,
                )?;
                model.accumulate_grad_logprob(
                    params,
                    pair.task,
                    &pair.rejected,
                    1.0,
                    -coef,
                    &mut grad,
                )?;
            }
            Ok((softplus(-beta * margin), margin > 0.0, grad))
        })
        .collect::<Result<_, OptimError>>()?;
    let mut out = DpoOutput {
        loss: 0.0,
        grad: Gradient::zeros_like(params),
        preference_accuracy: 0.0,
    };
    for (loss, correct, grad) in &parts {
        out.loss += loss / n;
        out.preference_accuracy += f64::from(u8::from(*correct)) / n;
        out.grad.add_scaled(grad, 1.0);
    }
    Ok(out)
}

/// Fraction of pairs whose chosen response is strictly more likely.
pub fn preference_accuracy(
    model: &Model,
    params: &PolicyParams,
    pairs: &[TokenizedPair<'_>],
) -> Result<f64, OptimError> {
    if pairs.is_empty() {
        return Err(OptimError::EmptyPairs);
    }
    let wins = pairs
        .par_iter()
        .map(|p| {
            let lw = model.logprob(params, p.task, &p.chosen)?.total;
            let ll = model.logprob(params, p.task, &p.rejected)?.total;
            Ok(usize::from(lw > ll))
        })
        .collect::<Result<Vec<_>, OptimError>>()?
        .into_iter()
        .sum::<usize>();
    Ok(wins as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateReport {
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Momentum SGD with global norm clipping. Frozen entries keep their
/// weights and zero velocity.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimConfig,
    velocity: Vec<f64>,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig) -> Result<Self, OptimError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            velocity: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    pub fn apply_update(
        &mut self,
        params: &mut PolicyParams,
        grad: &Gradient,
    ) -> Result<UpdateReport, OptimError> {
        if grad.vocab_size != params.vocab_size() || grad.feature_dim != params.feature_dim() {
            return Err(OptimError::Shape {
                grad: (grad.vocab_size, grad.feature_dim),
                params: (params.vocab_size(), params.feature_dim()),
            });
        }
        let bad: Vec<usize> = (0..grad.values.len())
            .filter(|&i| !grad.values[i].is_finite())
            .collect();
        if let Some(&first) = bad.first() {
            return Err(OptimError::NonFiniteGradient {
                count: bad.len(),
                first,
                value: grad.values[first],
            });
        }
        if self.velocity.len() != grad.values.len() {
            self.velocity = vec![0.0; grad.values.len()];
        }
        let norm = grad
            .values
            .iter()
            .enumerate()
            .filter(|(i, _)| !params.is_frozen(*i))
            .map(|(_, g)| g * g)
            .sum::<f64>()
            .sqrt();
        let clipped = norm > self.cfg.max_grad_norm;
        let scale = if clipped {
            self.cfg.max_grad_norm / norm
        } else {
            1.0
        };
        let (lr, mu) = (self.cfg.learning_rate, self.cfg.momentum);
        for i in 0..grad.values.len() {
            if params.is_frozen(i) {
                continue;
            }
            let v = mu * self.velocity[i] + scale * grad.values[i];
            self.velocity[i] = v;
            if v != 0.0 {
                params.weights_mut()[i] -= lr * v;
            }
        }
        params.bump_version();
        Ok(UpdateReport {
            grad_norm: norm,
            clipped,
        })
    }
}

/// Denominator floor for relative errors, so that coordinates whose true
/// gradient is ~0 are judged on absolute error instead. Central differences
/// of an O(10) loss at h = 1e-5 carry ~1e-10 of rounding noise, which a
/// smaller floor would inflate past any sensible relative tolerance.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
}

/// Compares the analytic gradient of `f` with central differences of step
/// `h` on a random subsample of at least `min_coords` coordinates (all of
/// them when there are fewer).
pub fn grad_check<F>(
    f: F,
    params: &PolicyParams,
    h: f64,
    min_coords: usize,
    seed: u64,
) -> GradCheckReport
where
    F: Fn(&PolicyParams) -> (f64, Gradient),
{
    let (_, analytic) = f(params);
    let total = params.weights().len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<usize> = if total <= min_coords {
        (0..total).collect()
    } else {
        index::sample(&mut rng, total, min_coords).into_vec()
    };
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for &i in &coords {
        let orig = probe.weights()[i];
        probe.weights_mut()[i] = orig + h;
        let up = f(&probe).0;
        probe.weights_mut()[i] = orig - h;
        let down = f(&probe).0;
        probe.weights_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.values[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max(rel);
    }
    GradCheckReport {
        max_rel_error: worst,
        coordinates: coords.len(),
    }
}
