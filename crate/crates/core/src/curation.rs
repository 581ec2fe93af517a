//! RL data admission: informative-group filtering, Ratio-EMA oversampling,
//! difficulty tiers and leakage screening.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::derive_seed;
use crate::policy::{Model, PolicyError, PolicyParams, SampleOptions};
use crate::reward_engine::RolloutGroup;
use crate::task_forge::{ArithOp, Task, Tier};
use crate::verifier::verify;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("invalid Ratio-EMA parameters: {0}")]
    InvalidEma(String),
    #[error("observed fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
    #[error("batch target must be at least 1")]
    ZeroTarget,
    #[error("tier weights must be positive with mastered <= partial and mastered <= unmastered, got {0:?}")]
    TierOrdering(TierWeights),
    #[error("no tasks to weight")]
    EmptyTierReport,
    #[error("task `{0}` has no evidence to ablate and cannot be screened")]
    NotScreenable(String),
    #[error("leakage screen needs at least one trial")]
    NoTrials,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Which groups count as informative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdmissionRule {
    /// Drop all-correct and all-wrong groups.
    MixedOnly,
    /// Drop only all-wrong groups.
    AnyCorrect,
}

/// Verdict on one group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Keep,
    AllCorrect,
    AllWrong,
    /// Passes the correctness rule but its advantages are all zero.
    NoSignal,
}

impl AdmissionRule {
    pub fn classify(self, group: &RolloutGroup) -> Admission {
        let neg = group.n_neg();
        if neg == group.n_rollout() {
            Admission::AllWrong
        } else if neg == 0 && self == AdmissionRule::MixedOnly {
            Admission::AllCorrect
        } else {
            Admission::Keep
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<RolloutGroup>,
    pub dropped_all_correct: usize,
    pub dropped_all_wrong: usize,
}

/// Keeps exactly the groups with `0 < n_neg < n_rollout`.
pub fn rejection_filter(groups: Vec<RolloutGroup>) -> FilterOutcome {
    admit(groups, AdmissionRule::MixedOnly)
}

pub fn admit(groups: Vec<RolloutGroup>, rule: AdmissionRule) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for g in groups {
        match rule.classify(&g) {
            Admission::AllWrong => out.dropped_all_wrong += 1,
            Admission::AllCorrect => out.dropped_all_correct += 1,
            Admission::Keep | Admission::NoSignal => out.kept.push(g),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RatioEmaConfig {
    pub alpha: f64,
    pub rho_min: f64,
    pub factor_cap: usize,
    pub rho_init: f64,
    /// Extra sampling rounds allowed when the first draw under-fills the batch.
    pub max_topup_rounds: usize,
}

impl Default for RatioEmaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            rho_min: 0.05,
            factor_cap: 8,
            rho_init: 1.0,
            max_topup_rounds: 4,
        }
    }
}

/// Exponential moving average of the informative-group fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioEmaState {
    pub rho: f64,
    pub alpha: f64,
    pub rho_min: f64,
    pub factor_cap: usize,
}

impl RatioEmaState {
    pub fn new(
        rho: f64,
        alpha: f64,
        rho_min: f64,
        factor_cap: usize,
    ) -> Result<Self, CurationError> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(CurationError::InvalidEma(format!(
                "alpha {alpha} not in (0, 1]"
            )));
        }
        if !(rho_min > 0.0 && rho_min <= rho && rho <= 1.0) {
            return Err(CurationError::InvalidEma(format!(
                "need 0 < rho_min <= rho <= 1, got rho_min={rho_min} rho={rho}"
            )));
        }
        if factor_cap == 0 {
            return Err(CurationError::InvalidEma("factor_cap must be >= 1".into()));
        }
        Ok(Self {
            rho,
            alpha,
            rho_min,
            factor_cap,
        })
    }

    pub fn from_config(cfg: &RatioEmaConfig) -> Result<Self, CurationError> {
        Self::new(cfg.rho_init, cfg.alpha, cfg.rho_min, cfg.factor_cap)
    }

    pub fn update(&mut self, observed: f64) -> Result<f64, CurationError> {
        if !(0.0..=1.0).contains(&observed) {
            return Err(CurationError::InvalidFraction(observed));
        }
        self.rho = ((1.0 - self.alpha) * self.rho + self.alpha * observed).max(self.rho_min);
        Ok(self.rho)
    }

    /// `ceil(target / rho)`, capped at `factor_cap * target`.
    pub fn oversample_count(&self, target: usize) -> Result<usize, CurationError> {
        if target == 0 {
            return Err(CurationError::ZeroTarget);
        }
        // Guard against 16 / 0.4 landing a hair above 40.
        let raw = (target as f64 / self.rho - 1e-9).ceil() as usize;
        Ok(raw.max(target).min(self.factor_cap * target))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FillOutcome {
    /// At most `target` admitted groups, in draw order.
    pub kept: Vec<RolloutGroup>,
    pub sampled: usize,
    pub admitted: usize,
    pub dropped_all_correct: usize,
    pub dropped_all_wrong: usize,
    pub dropped_no_signal: usize,
    pub rounds: usize,
    pub filled: bool,
}

/// Draws groups until `target` are admitted, using the Ratio-EMA estimate
/// to size each draw, then folds the observed admission rate into the EMA.
///
/// `draw(offset, count)` must return `count` groups; `offset` is the number
/// already drawn this batch, so callers can derive per-draw seeds from it.
/// `classify` decides admission per group. The total drawn never exceeds
/// `factor_cap * target`.
pub fn fill_batch<E, F, C>(
    state: &mut RatioEmaState,
    target: usize,
    max_topup_rounds: usize,
    mut classify: C,
    mut draw: F,
) -> Result<FillOutcome, E>
where
    E: From<CurationError>,
    F: FnMut(usize, usize) -> Result<Vec<RolloutGroup>, E>,
    C: FnMut(&RolloutGroup) -> Result<Admission, E>,
{
    let budget = state.factor_cap * target.max(1);
    let mut out = FillOutcome {
        kept: Vec::new(),
        sampled: 0,
        admitted: 0,
        dropped_all_correct: 0,
        dropped_all_wrong: 0,
        dropped_no_signal: 0,
        rounds: 0,
        filled: false,
    };
    while out.rounds <= max_topup_rounds && out.admitted < target && out.sampled < budget {
        let want = state.oversample_count(target - out.admitted)?;
        let count = want.min(budget - out.sampled);
        let groups = draw(out.sampled, count)?;
        out.sampled += groups.len();
        out.rounds += 1;
        for g in groups {
            match classify(&g)? {
                Admission::Keep => {
                    out.admitted += 1;
                    out.kept.push(g);
                }
                Admission::AllCorrect => out.dropped_all_correct += 1,
                Admission::AllWrong => out.dropped_all_wrong += 1,
                Admission::NoSignal => out.dropped_no_signal += 1,
            }
        }
    }
    if out.sampled > 0 {
        state.update(out.admitted as f64 / out.sampled as f64)?;
    }
    out.kept.truncate(target);
    out.filled = out.kept.len() >= target;
    Ok(out)
}

pub fn tier_classify(group_accuracy: f64) -> Tier {
    if group_accuracy >= 1.0 {
        Tier::Mastered
    } else if group_accuracy <= 0.0 {
        Tier::Unmastered
    } else {
        Tier::Partial
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierWeights {
    pub mastered: f64,
    pub partial: f64,
    pub unmastered: f64,
}

impl Default for TierWeights {
    fn default() -> Self {
        Self {
            mastered: 0.2,
            partial: 1.0,
            unmastered: 1.0,
        }
    }
}

impl TierWeights {
    pub fn validate(&self) -> Result<(), CurationError> {
        let positive = self.mastered > 0.0 && self.partial > 0.0 && self.unmastered > 0.0;
        if positive && self.mastered <= self.partial.min(self.unmastered) {
            Ok(())
        } else {
            Err(CurationError::TierOrdering(*self))
        }
    }

    /// Weight of a tier; tasks never seen count as partially mastered.
    pub fn weight(&self, tier: Tier) -> f64 {
        match tier {
            Tier::Mastered => self.mastered,
            Tier::Partial | Tier::Unknown => self.partial,
            Tier::Unmastered => self.unmastered,
        }
    }
}

/// Latest tier of each task, keyed by task id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TierReport {
    pub tiers: BTreeMap<String, Tier>,
}

impl TierReport {
    pub fn record(&mut self, task_id: &str, group_accuracy: f64) -> Tier {
        let tier = tier_classify(group_accuracy);
        self.tiers.insert(task_id.to_string(), tier);
        tier
    }

    pub fn tier(&self, task_id: &str) -> Tier {
        self.tiers.get(task_id).copied().unwrap_or_default()
    }

    pub fn count(&self, tier: Tier) -> usize {
        self.tiers.values().filter(|&&t| t == tier).count()
    }
}

/// Normalised per-task sampling probabilities, in task-id order.
pub fn resample_weights(
    report: &TierReport,
    base: &TierWeights,
) -> Result<Vec<(String, f64)>, CurationError> {
    base.validate()?;
    if report.tiers.is_empty() {
        return Err(CurationError::EmptyTierReport);
    }
    let total: f64 = report.tiers.values().map(|&t| base.weight(t)).sum();
    Ok(report
        .tiers
        .iter()
        .map(|(id, &t)| (id.clone(), base.weight(t) / total))
        .collect())
}

/// Anything that can answer a task; used to probe for answers that do not
/// need the evidence.
pub trait Responder: Sync {
    fn respond(&self, task: &Task, trial: usize) -> Result<String, CurationError>;
}

/// Samples from a policy, one derived seed per (task, trial).
pub struct PolicyResponder<'a> {
    pub model: &'a Model,
    pub params: &'a PolicyParams,
    pub opts: SampleOptions,
    pub seed: u64,
}

impl Responder for PolicyResponder<'_> {
    fn respond(&self, task: &Task, trial: usize) -> Result<String, CurationError> {
        let seed = derive_seed(self.seed, &task.id, &[trial as u64]);
        Ok(self.model.sample(self.params, task, &self.opts, seed)?.text)
    }
}

/// Language-prior stand-in: solves a context task from its prompt alone
/// when the prompt restates the operand, and otherwise guesses uniformly.
pub struct PromptSolver {
    pub seed: u64,
}

fn stated_operand() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"\(x (\S) (\d+)\) mod (\d+) where x = (\d+)").expect("valid pattern")
    })
}

impl PromptSolver {
    pub fn solve(prompt: &str) -> Option<i64> {
        let caps = stated_operand().captures(prompt)?;
        let op = ArithOp::from_symbol(caps[1].chars().next()?)?;
        let b: i64 = caps[2].parse().ok()?;
        let m: i64 = caps[3].parse().ok()?;
        let x: i64 = caps[4].parse().ok()?;
        (m >= 2).then(|| op.apply_mod(x, b, m))
    }
}

impl Responder for PromptSolver {
    fn respond(&self, task: &Task, trial: usize) -> Result<String, CurationError> {
        let value = match Self::solve(&task.prompt) {
            Some(v) => v,
            None => {
                let m = task.modulus().unwrap_or(10);
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &task.id, &[trial as u64]));
                i64::from(rng.random_range(0..m))
            }
        };
        Ok(format!("\\boxed{{{value}}}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScreenDecision {
    Clean,
    Leaked,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScreenResult {
    pub decision: ScreenDecision,
    pub matches: usize,
    pub trials: usize,
    pub match_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScreenConfig {
    pub n_trials: usize,
    pub threshold: f64,
}

impl Default for ScreenConfig {
    fn default() -> Self {
        Self {
            n_trials: 8,
            threshold: 0.5,
        }
    }
}

/// Answers the task with its evidence removed; if the responses still agree
/// with the original ground truth at least `threshold` of the time, the
/// task is leaked.
pub fn leakage_screen(
    task: &Task,
    responder: &dyn Responder,
    n_trials: usize,
    threshold: f64,
) -> Result<ScreenResult, CurationError> {
    if task.is_text_only || !task.requires_context || task.context.is_none() {
        return Err(CurationError::NotScreenable(task.id.clone()));
    }
    if n_trials == 0 {
        return Err(CurationError::NoTrials);
    }
    let mut blind = task.clone();
    blind.context = None;
    let mut matches = 0;
    for trial in 0..n_trials {
        let response = responder.respond(&blind, trial)?;
        matches += usize::from(verify(&response, &task.ground_truth).is_correct());
    }
    let match_rate = matches as f64 / n_trials as f64;
    let decision = if match_rate >= threshold {
        ScreenDecision::Leaked
    } else {
        ScreenDecision::Clean
    };
    Ok(ScreenResult {
        decision,
        matches,
        trials: n_trials,
        match_rate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurationRecord {
    pub task_id: String,
    pub decision: ScreenDecision,
    pub tier: Tier,
    pub match_rate: f64,
}

/// Screens every evidence-bearing task in `tasks`; other tasks are skipped.
pub fn screen_tasks(
    tasks: &[Task],
    responder: &dyn Responder,
    cfg: &ScreenConfig,
) -> Result<Vec<CurationRecord>, CurationError> {
    tasks
        .par_iter()
        .filter(|t| t.requires_context && t.context.is_some() && !t.is_text_only)
        .map(|t| {
            let r = leakage_screen(t, responder, cfg.n_trials, cfg.threshold)?;
            Ok(CurationRecord {
                task_id: t.id.clone(),
                decision: r.decision,
                tier: t.tier,
                match_rate: r.match_rate,
            })
        })
        .collect()
}

pub fn write_curation_jsonl<W: Write>(
    mut out: W,
    records: &[CurationRecord],
) -> Result<(), CurationError> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Rollout;
    use crate::task_forge::gen_context_tasks;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn group(correct: &[u8]) -> RolloutGroup {
        let r = Rollout {
            task_id: "t".into(),
            tokens: vec![0],
            text: String::new(),
            length: 1,
            logprob_old: 0.0,
            logprob_cur: 0.0,
            truncated_by_redundancy: false,
        };
        RolloutGroup::new("t", vec![r; correct.len()], correct.to_vec()).unwrap()
    }

    #[test]
    fn filter_examples() {
        let out = rejection_filter(vec![
            group(&[1, 1, 1, 1]),
            group(&[0, 0, 0, 0]),
            group(&[1, 0, 1, 0]),
        ]);
        assert_eq!(out.dropped_all_correct, 1);
        assert_eq!(out.dropped_all_wrong, 1);
        assert_eq!(out.kept, vec![group(&[1, 0, 1, 0])]);
        assert_eq!(rejection_filter(vec![]), FilterOutcome::default());
        let lenient = admit(
            vec![group(&[1, 1]), group(&[0, 0])],
            AdmissionRule::AnyCorrect,
        );
        assert_eq!((lenient.kept.len(), lenient.dropped_all_wrong), (1, 1));
    }

    #[test]
    fn ema_examples() {
        let mut s = RatioEmaState::new(0.5, 0.1, 0.05, 8).unwrap();
        assert_abs_diff_eq!(s.update(0.3).unwrap(), 0.48, epsilon = 1e-12);
        let mut fixed = RatioEmaState::new(0.4, 0.1, 0.05, 8).unwrap();
        fixed.update(0.4).unwrap();
        assert_abs_diff_eq!(fixed.rho, 0.4, epsilon = 1e-15);
        let mut low = RatioEmaState::new(0.05, 0.5, 0.05, 8).unwrap();
        assert_eq!(low.update(0.0).unwrap(), 0.05);
        assert!(s.update(1.5).is_err());
        assert!(RatioEmaState::new(0.5, 0.0, 0.05, 8).is_err());
    }

    #[test]
    fn oversample_examples() {
        let s = |rho| RatioEmaState::new(rho, 0.1, 0.05, 8).unwrap();
        assert_eq!(s(0.4).oversample_count(16).unwrap(), 40);
        assert_eq!(s(1.0).oversample_count(16).unwrap(), 16);
        assert_eq!(s(0.05).oversample_count(16).unwrap(), 128);
        assert!(s(0.5).oversample_count(0).is_err());
    }

    #[test]
    fn fill_tops_up_and_respects_cap() {
        let mixed = |g: &RolloutGroup| Ok(AdmissionRule::MixedOnly.classify(g));
        let mut s = RatioEmaState::new(1.0, 0.1, 0.05, 4).unwrap();
        // Every third group is informative.
        let mut calls = Vec::new();
        let out: FillOutcome = fill_batch::<CurationError, _, _>(&mut s, 4, 10, mixed, |off, n| {
            calls.push((off, n));
            Ok((off..off + n)
                .map(|i| {
                    if i % 3 == 0 {
                        group(&[1, 0])
                    } else {
                        group(&[1, 1])
                    }
                })
                .collect())
        })
        .unwrap();
        assert!(out.filled);
        assert_eq!(out.kept.len(), 4);
        assert_eq!(calls[0], (0, 4));
        assert!(out.sampled <= 16);
        assert!(s.rho < 1.0);

        let mut s = RatioEmaState::new(1.0, 0.1, 0.05, 2).unwrap();
        let out = fill_batch::<CurationError, _, _>(&mut s, 4, 10, mixed, |_, n| {
            Ok(vec![group(&[0, 0]); n])
        })
        .unwrap();
        assert!(!out.filled);
        assert_eq!(out.sampled, 8);
        assert_eq!(out.dropped_all_wrong, 8);
    }

    #[test]
    fn fill_counts_no_signal_drops() {
        let mut s = RatioEmaState::new(1.0, 0.5, 0.05, 4).unwrap();
        let no_signal_first = |g: &RolloutGroup| {
            Ok::<_, CurationError>(if g.correctness[0] == 1 {
                Admission::NoSignal
            } else {
                Admission::Keep
            })
        };
        let out = fill_batch(&mut s, 2, 10, no_signal_first, |off, n| {
            Ok((off..off + n)
                .map(|i| {
                    if i % 2 == 0 {
                        group(&[1, 0])
                    } else {
                        group(&[0, 1])
                    }
                })
                .collect())
        })
        .unwrap();
        assert!(out.filled);
        assert_eq!(out.dropped_no_signal + out.admitted, out.sampled);
        assert!(out.kept.iter().all(|g| g.correctness[0] == 0));
        assert!((s.rho - (0.5 + 0.5 * out.admitted as f64 / out.sampled as f64)).abs() < 1e-12);
    }

    #[test]
    fn tiers_and_weights() {
        assert_eq!(tier_classify(1.0), Tier::Mastered);
        assert_eq!(tier_classify(0.5), Tier::Partial);
        assert_eq!(tier_classify(0.0), Tier::Unmastered);

        let mut report = TierReport::default();
        report.record("a", 1.0);
        report.record("b", 0.5);
        report.record("c", 0.0);
        let w = resample_weights(&report, &TierWeights::default()).unwrap();
        let probs: Vec<f64> = w.iter().map(|x| x.1).collect();
        for (p, want) in probs.iter().zip([1.0 / 11.0, 5.0 / 11.0, 5.0 / 11.0]) {
            assert_abs_diff_eq!(*p, want, epsilon = 1e-12);
        }

        let mut all = TierReport::default();
        for id in ["x", "y", "z", "w"] {
            all.record(id, 1.0);
        }
        assert!(resample_weights(&all, &TierWeights::default())
            .unwrap()
            .iter()
            .all(|(_, p)| (*p - 0.25).abs() < 1e-15));
        assert!(matches!(
            resample_weights(&TierReport::default(), &TierWeights::default()),
            Err(CurationError::EmptyTierReport)
        ));
        let bad = TierWeights {
            mastered: 2.0,
            partial: 1.0,
            unmastered: 1.0,
        };
        assert!(matches!(
            resample_weights(&report, &bad),
            Err(CurationError::TierOrdering(_))
        ));
    }

    /// Answers correctly on the listed trials, wrongly otherwise.
    struct Scripted(Vec<bool>);

    impl Responder for Scripted {
        fn respond(&self, task: &Task, trial: usize) -> Result<String, CurationError> {
            assert!(task.context.is_none());
            Ok(if self.0[trial] {
                "\\boxed{3}".into()
            } else {
                "\\boxed{4}".into()
            })
        }
    }

    fn ctx_task() -> Task {
        let mut t = gen_context_tasks(1, 10, 0.0, 0).unwrap().remove(0);
        t.ground_truth = "3".into();
        t
    }

    #[test]
    fn screen_examples() {
        let t = ctx_task();
        let r = leakage_screen(&t, &Scripted(vec![true, true, true, false]), 4, 0.5).unwrap();
        assert_eq!(r.decision, ScreenDecision::Leaked);
        assert_abs_diff_eq!(r.match_rate, 0.75);
        let r = leakage_screen(&t, &Scripted(vec![false; 4]), 4, 0.5).unwrap();
        assert_eq!((r.decision, r.match_rate), (ScreenDecision::Clean, 0.0));
        let r = leakage_screen(&t, &Scripted(vec![false; 4]), 4, 0.0).unwrap();
        assert_eq!(r.decision, ScreenDecision::Leaked);

        let mut text = t.clone();
        text.is_text_only = true;
        text.requires_context = false;
        text.context = None;
        assert!(matches!(
            leakage_screen(&text, &Scripted(vec![]), 4, 0.5),
            Err(CurationError::NotScreenable(_))
        ));
    }

    #[test]
    fn prompt_solver_detects_stated_evidence() {
        let tasks = gen_context_tasks(40, 10, 0.25, 3).unwrap();
        let solver = PromptSolver { seed: 1 };
        let records = screen_tasks(&tasks, &solver, &ScreenConfig::default()).unwrap();
        assert_eq!(records.len(), 40);
        for (t, r) in tasks.iter().zip(&records) {
            assert_eq!(t.id, r.task_id);
            if t.tags.contains("prompt-states-evidence") {
                assert_eq!(r.decision, ScreenDecision::Leaked);
                assert_eq!(r.match_rate, 1.0);
            }
        }
        let clean = records
            .iter()
            .filter(|r| r.decision == ScreenDecision::Clean)
            .count();
        assert!(clean >= 25, "{clean}");
        let mut buf = Vec::new();
        write_curation_jsonl(&mut buf, &records[..1]).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, ["decision", "match_rate", "task_id", "tier"]);
    }

    proptest! {
        #[test]
        fn filter_partitions_and_is_idempotent(groups in prop::collection::vec(prop::collection::vec(0u8..2, 2..6), 0..30)) {
            let gs: Vec<RolloutGroup> = groups.iter().map(|c| group(c)).collect();
            let out = rejection_filter(gs.clone());
            prop_assert_eq!(out.kept.len() + out.dropped_all_correct + out.dropped_all_wrong, gs.len());
            prop_assert!(out.kept.iter().all(RolloutGroup::is_mixed));
            let again = rejection_filter(out.kept.clone());
            prop_assert_eq!(again.kept, out.kept);
        }

        #[test]
        fn rho_stays_in_bounds(obs in prop::collection::vec(0.0f64..=1.0, 1..200), alpha in 0.01f64..=1.0) {
            let mut s = RatioEmaState::new(1.0, alpha, 0.05, 8).unwrap();
            for o in obs {
                let rho = s.update(o).unwrap();
                prop_assert!((0.05..=1.0).contains(&rho));
            }
        }

        #[test]
        fn oversample_monotone(r1 in 0.05f64..=1.0, r2 in 0.05f64..=1.0, target in 1usize..64) {
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let a = RatioEmaState::new(lo, 0.1, 0.05, 8).unwrap().oversample_count(target).unwrap();
            let b = RatioEmaState::new(hi, 0.1, 0.05, 8).unwrap().oversample_count(target).unwrap();
            prop_assert!(a >= b);
            prop_assert_eq!(RatioEmaState::new(1.0, 0.1, 0.05, 8).unwrap().oversample_count(target).unwrap(), target);
        }
    }
}
