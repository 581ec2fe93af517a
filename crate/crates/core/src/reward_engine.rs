//! Reward and advantage formulas for hybrid-reward RLVR.
//!
//! * Pass@1: the verifier's binary exact-match reward.
//! * Pass@k group statistics: responses are viewed through all `C(N, k)`
//!   subsets, each scored by its best member. With `N_neg` wrong responses
//!   the subset mean is `1 - C(N_neg, k) / C(N, k)` and, the subset score
//!   being Bernoulli, its std is `sqrt(mean * (1 - mean))`. A correct
//!   response standardizes to `(1 - mean) / std`, an incorrect one to
//!   `-mean / std`.
//! * Diversity: mean pairwise semantic distance, mapped per group onto
//!   `[norm_lo, norm_hi]` and multiplied into the Pass@1 reward, then
//!   mean-centred.
//! * Length: zero up to `L_max - L_soft`, a linear ramp to `-1` at `L_max`,
//!   and `-1` beyond.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::Rollout;
use crate::verifier::{extract_boxed, is_abstain, is_refusal, normalize, Verdict};

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("group is degenerate (sigma = 0); advantages vanish")]
    DegenerateGroup,
    #[error("invalid Pass@k arguments: n_rollout={n_rollout}, n_neg={n_neg}, k={k}")]
    InvalidPassK {
        n_rollout: usize,
        n_neg: usize,
        k: usize,
    },
    #[error("binomial coefficient C({0}, {1}) overflows")]
    BinomialOverflow(usize, usize),
    #[error("need at least {needed} responses, got {got}")]
    TooFewResponses { needed: usize, got: usize },
    #[error("length mismatch: {0} rewards vs {1} diversity scores")]
    LengthMismatch(usize, usize),
    #[error("invalid config: {0}")]
    Config(String),
}

/// Sampled responses to one task together with their verifier rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub task_id: String,
    pub rollouts: Vec<Rollout>,
    pub correctness: Vec<u8>,
}

impl RolloutGroup {
    pub fn new(
        task_id: impl Into<String>,
        rollouts: Vec<Rollout>,
        correctness: Vec<u8>,
    ) -> Result<Self, RewardError> {
        if rollouts.len() < 2 {
            return Err(RewardError::TooFewResponses {
                needed: 2,
                got: rollouts.len(),
            });
        }
        if correctness.len() != rollouts.len() {
            return Err(RewardError::LengthMismatch(
                correctness.len(),
                rollouts.len(),
            ));
        }
        Ok(Self {
            task_id: task_id.into(),
            rollouts,
            correctness,
        })
    }

    pub fn n_rollout(&self) -> usize {
        self.rollouts.len()
    }

    pub fn n_neg(&self) -> usize {
        self.correctness.iter().filter(|&&c| c == 0).count()
    }

    pub fn accuracy(&self) -> f64 {
        (self.n_rollout() - self.n_neg()) as f64 / self.n_rollout() as f64
    }

    /// Neither all correct nor all wrong.
    pub fn is_mixed(&self) -> bool {
        let neg = self.n_neg();
        neg > 0 && neg < self.n_rollout()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub n_rollout: usize,
    pub n_neg: usize,
    pub k: usize,
    pub r_bar_group: f64,
    pub sigma_group: f64,
    /// Zero when the group is degenerate.
    pub a_pos: f64,
    /// Zero when the group is degenerate.
    pub a_neg: f64,
}

impl GroupStats {
    pub fn is_degenerate(&self) -> bool {
        self.sigma_group == 0.0
    }
}

/// Exact `C(n, k)`; zero when `k > n`.
pub fn binomial(n: usize, k: usize) -> Result<u128, RewardError> {
    if k > n {
        return Ok(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) is divisible by (i + 1) at every step.
        acc = acc
            .checked_mul((n - i) as u128)
            .ok_or(RewardError::BinomialOverflow(n, k))?
            / (i as u128 + 1);
    }
    Ok(acc)
}

pub fn pass1_reward(verdict: &Verdict) -> f64 {
    f64::from(verdict.reward)
}

/// Closed-form Pass@k group mean, std and class advantages.
pub fn passk_stats(n_rollout: usize, n_neg: usize, k: usize) -> Result<GroupStats, RewardError> {
    if k == 0 || k > n_rollout || n_neg > n_rollout {
        return Err(RewardError::InvalidPassK {
            n_rollout,
            n_neg,
            k,
        });
    }
    let total = binomial(n_rollout, k)?;
    let negative = binomial(n_neg, k)?;
    let r_bar = if negative == 0 {
        1.0
    } else {
        (total - negative) as f64 / total as f64
    };
    let sigma = (r_bar * (1.0 - r_bar)).sqrt();
    let mut stats = GroupStats {
        n_rollout,
        n_neg,
        k,
        r_bar_group: r_bar,
        sigma_group: sigma,
        a_pos: 0.0,
        a_neg: 0.0,
    };
    if let Ok((a_pos, a_neg)) = passk_advantages(&stats) {
        stats.a_pos = a_pos;
        stats.a_neg = a_neg;
    }
    Ok(stats)
}

/// `(a_pos, a_neg)`: the standardized values of a unit and a zero reward.
pub fn passk_advantages(stats: &GroupStats) -> Result<(f64, f64), RewardError> {
    if !(stats.sigma_group > 0.0) {
        return Err(RewardError::DegenerateGroup);
    }
    Ok((
        (1.0 - stats.r_bar_group) / stats.sigma_group,
        -stats.r_bar_group / stats.sigma_group,
    ))
}

/// A semantic distance between two responses. Must be symmetric and non-negative.
pub trait SemanticDistance: Send + Sync {
    fn distance(&self, a: &str, b: &str) -> f64;
}

/// Cosine distance over character-trigram count vectors.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrigramCosine;

fn trigram_counts(text: &str) -> HashMap<&str, f64> {
    let bounds: Vec<usize> = text
        .char_indices()
        .map(|(i, _)| i)
        .chain([text.len()])
        .collect();
    let n_chars = bounds.len() - 1;
    let mut counts = HashMap::new();
    if n_chars == 0 {
        return counts;
    }
    if n_chars < 3 {
        counts.insert(text, 1.0);
        return counts;
    }
    for w in 0..=n_chars - 3 {
        *counts.entry(&text[bounds[w]..bounds[w + 3]]).or_insert(0.0) += 1.0;
    }
    counts
}

impl SemanticDistance for TrigramCosine {
    fn distance(&self, a: &str, b: &str) -> f64 {
        if a == b {
            return 0.0;
        }
        let ca = trigram_counts(a);
        let cb = trigram_counts(b);
        if ca.is_empty() || cb.is_empty() {
            return 1.0;
        }
        let dot: f64 = ca
            .iter()
            .filter_map(|(g, x)| cb.get(g).map(|y| x * y))
            .sum();
        let na: f64 = ca.values().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = cb.values().map(|x| x * x).sum::<f64>().sqrt();
        (1.0 - dot / (na * nb)).clamp(0.0, 1.0)
    }
}

/// 0 when two responses commit to the same final answer, 1 otherwise.
/// Refusals count as abstentions; responses with no answer at all form
/// one class of their own.
#[derive(Debug, Clone, Copy, Default)]
pub struct FinalAnswer;

fn answer_key(text: &str) -> Option<String> {
    match extract_boxed(text) {
        Some(a) if is_abstain(&a) => Some("<abstain>".into()),
        Some(a) => Some(normalize(&a)),
        None if is_refusal(text) => Some("<abstain>".into()),
        None => None,
    }
}

impl SemanticDistance for FinalAnswer {
    fn distance(&self, a: &str, b: &str) -> f64 {
        if a == b || answer_key(a) == answer_key(b) {
            0.0
        } else {
            1.0
        }
    }
}

/// Source of sentence vectors, e.g. an external encoder.
pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Cosine distance between embeddings from any [`Embedder`].
pub struct EmbeddingCosine<E>(pub E);

impl<E: Embedder> SemanticDistance for EmbeddingCosine<E> {
    fn distance(&self, a: &str, b: &str) -> f64 {
        let (u, v) = (self.0.embed(a), self.0.embed(b));
        let dot: f64 = u.iter().zip(&v).map(|(x, y)| x * y).sum();
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nu == 0.0 || nv == 0.0 {
            return if nu == nv { 0.0 } else { 1.0 };
        }
        (1.0 - dot / (nu * nv)).clamp(0.0, 2.0)
    }
}

#[derive(Clone)]
pub struct DiversityConfig {
    pub distance: Arc<dyn SemanticDistance>,
    pub norm_lo: f64,
    pub norm_hi: f64,
    /// Responses closer than or equal to this distance count as the same.
    pub similarity_threshold: f64,
}

impl fmt::Debug for DiversityConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiversityConfig")
            .field("norm_lo", &self.norm_lo)
            .field("norm_hi", &self.norm_hi)
            .field("similarity_threshold", &self.similarity_threshold)
            .finish_non_exhaustive()
    }
}

impl Default for DiversityConfig {
    fn default() -> Self {
        Self {
            distance: Arc::new(TrigramCosine),
            norm_lo: 0.5,
            norm_hi: 1.0,
            similarity_threshold: 0.2,
        }
    }
}

impl DiversityConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(0.0 <= self.norm_lo && self.norm_lo <= self.norm_hi) {
            return Err(RewardError::Config(format!(
                "need 0 <= norm_lo <= norm_hi, got [{}, {}]",
                self.norm_lo, self.norm_hi
            )));
        }
        if !(self.similarity_threshold >= 0.0) {
            return Err(RewardError::Config(
                "similarity threshold must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// `Div_i`: mean distance from response `i` to every other response.
pub fn diversity_scores<S: AsRef<str>>(
    responses: &[S],
    cfg: &DiversityConfig,
) -> Result<Vec<f64>, RewardError> {
    let n = responses.len();
    if n < 2 {
        return Err(RewardError::TooFewResponses { needed: 2, got: n });
    }
    let mut sums = vec![0.0; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = cfg
                .distance
                .distance(responses[i].as_ref(), responses[j].as_ref());
            sums[i] += d;
            sums[j] += d;
        }
    }
    Ok(sums.into_iter().map(|s| s / (n - 1) as f64).collect())
}

/// `R_diversity_i = r_i * Norm(Div_i)` with `Norm` the per-group affine map
/// of `[min Div, max Div]` onto `[norm_lo, norm_hi]` (constant `norm_hi`
/// when all scores tie).
pub fn fuse_diversity(
    rewards: &[f64],
    div: &[f64],
    cfg: &DiversityConfig,
) -> Result<Vec<f64>, RewardError> {
    if rewards.len() != div.len() {
        return Err(RewardError::LengthMismatch(rewards.len(), div.len()));
    }
    let lo = div.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = div.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Ok(rewards
        .iter()
        .zip(div)
        .map(|(&r, &d)| {
            let norm = if span > 0.0 {
                cfg.norm_lo + (cfg.norm_hi - cfg.norm_lo) * (d - lo) / span
            } else {
                cfg.norm_hi
            };
            r * norm
        })
        .collect())
}

pub fn diversity_advantages(r_div: &[f64]) -> Vec<f64> {
    if r_div.is_empty() {
        return Vec::new();
    }
    let mean = r_div.iter().sum::<f64>() / r_div.len() as f64;
    r_div.iter().map(|r| r - mean).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LengthConfig {
    pub l_max: usize,
    pub l_soft: usize,
}

impl Default for LengthConfig {
    fn default() -> Self {
        Self {
            l_max: 512,
            l_soft: 128,
        }
    }
}

impl LengthConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if self.l_soft == 0 || self.l_soft >= self.l_max {
            return Err(RewardError::Config(format!(
                "need 0 < l_soft < l_max, got l_soft={} l_max={}",
                self.l_soft, self.l_max
            )));
        }
        Ok(())
    }
}

pub fn length_reward(length: usize, cfg: &LengthConfig) -> f64 {
    let free = cfg.l_max - cfg.l_soft;
    if length <= free {
        0.0
    } else if length <= cfg.l_max {
        (free as f64 - length as f64) / cfg.l_soft as f64
    } else {
        -1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    EarlyPassk,
    LateDiversity,
}

#[derive(Debug, Clone)]
pub struct HybridRewardConfig {
    pub k: usize,
    pub diversity: DiversityConfig,
    pub length: LengthConfig,
    /// Weight of the length term; zero disables it.
    pub w_len: f64,
}

impl Default for HybridRewardConfig {
    fn default() -> Self {
        Self {
            k: 4,
            diversity: DiversityConfig::default(),
            length: LengthConfig::default(),
            w_len: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridAdvantages {
    pub values: Vec<f64>,
    /// Set when the Pass@k statistics had zero spread and all values were zeroed.
    pub degenerate: bool,
}

/// Per-response advantages for the given training phase, plus the weighted
/// length term.
pub fn hybrid_advantage(
    group: &RolloutGroup,
    phase: Phase,
    cfg: &HybridRewardConfig,
) -> Result<HybridAdvantages, RewardError> {
    let n = group.n_rollout();
    let base = match phase {
        Phase::EarlyPassk => {
            let stats = passk_stats(n, group.n_neg(), cfg.k)?;
            if stats.is_degenerate() {
                return Ok(HybridAdvantages {
                    values: vec![0.0; n],
                    degenerate: true,
                });
            }
            group
                .correctness
                .iter()
                .map(|&c| if c == 1 { stats.a_pos } else { stats.a_neg })
                .collect::<Vec<_>>()
        }
        Phase::LateDiversity => {
            let texts: Vec<&str> = group.rollouts.iter().map(|r| r.text.as_str()).collect();
            let div = diversity_scores(&texts, &cfg.diversity)?;
            let rewards: Vec<f64> = group.correctness.iter().map(|&c| f64::from(c)).collect();
            diversity_advantages(&fuse_diversity(&rewards, &div, &cfg.diversity)?)
        }
    };
    let values = base
        .into_iter()
        .zip(&group.rollouts)
        .map(|(a, r)| {
            if cfg.w_len == 0.0 {
                a
            } else {
                a + cfg.w_len * length_reward(r.length, &cfg.length)
            }
        })
        .collect();
    Ok(HybridAdvantages {
        values,
        degenerate: false,
    })
}

/// Greedy clustering: each response joins the first representative within
/// the similarity threshold, otherwise it founds a new cluster.
pub fn cluster_responses<S: AsRef<str>>(responses: &[S], cfg: &DiversityConfig) -> Vec<usize> {
    let mut reps: Vec<usize> = Vec::new();
    responses
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let found = reps.iter().position(|&rep| {
                cfg.distance.distance(r.as_ref(), responses[rep].as_ref())
                    <= cfg.similarity_threshold
            });
            found.unwrap_or_else(|| {
                reps.push(i);
                reps.len() - 1
            })
        })
        .collect()
}

/// Number of semantically distinct responses.
pub fn distinct_count<S: AsRef<str>>(responses: &[S], cfg: &DiversityConfig) -> usize {
    cluster_responses(responses, cfg)
        .into_iter()
        .max()
        .map_or(0, |m| m + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Exhaustive subset-max oracle: returns (mean, std, a_pos, a_neg).
    fn enumerate_passk(n: usize, n_neg: usize, k: usize) -> (f64, f64, Option<(f64, f64)>) {
        let rewards: Vec<u8> = (0..n).map(|i| u8::from(i >= n_neg)).collect();
        let scores: Vec<f64> = (0u32..1 << n)
            .filter(|m| m.count_ones() as usize == k)
            .map(|m| {
                let best = (0..n)
                    .filter(|i| m >> i & 1 == 1)
                    .map(|i| rewards[i])
                    .max()
                    .unwrap();
                f64::from(best)
            })
            .collect();
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / scores.len() as f64;
        let std = var.sqrt();
        let adv = (std > 1e-15).then(|| ((1.0 - mean) / std, (0.0 - mean) / std));
        (mean, std, adv)
    }

    #[derive(Clone)]
    struct Table(Vec<Vec<f64>>, Vec<&'static str>);
    impl SemanticDistance for Table {
        fn distance(&self, a: &str, b: &str) -> f64 {
            let i = self.1.iter().position(|s| *s == a).unwrap();
            let j = self.1.iter().position(|s| *s == b).unwrap();
            self.0[i][j]
        }
    }

    fn table_cfg(d: [[f64; 3]; 3], tau: f64) -> DiversityConfig {
        DiversityConfig {
            distance: Arc::new(Table(
                d.iter().map(|r| r.to_vec()).collect(),
                vec!["a", "b", "c"],
            )),
            similarity_threshold: tau,
            ..DiversityConfig::default()
        }
    }

    fn rollout(text: &str, length: usize) -> Rollout {
        Rollout {
            task_id: "t".into(),
            tokens: vec![0; length],
            text: text.into(),
            length,
            logprob_old: 0.0,
            logprob_cur: 0.0,
            truncated_by_redundancy: false,
        }
    }

    fn group(correct: &[u8], lengths: &[usize]) -> RolloutGroup {
        let rollouts = correct
            .iter()
            .zip(lengths)
            .map(|(c, &l)| rollout(if *c == 1 { "\\boxed{1}" } else { "\\boxed{2}" }, l))
            .collect();
        RolloutGroup::new("t", rollouts, correct.to_vec()).unwrap()
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(4, 2).unwrap(), 6);
        assert_eq!(binomial(2, 3).unwrap(), 0);
        assert_eq!(binomial(60, 30).unwrap(), 118_264_581_564_861_424);
    }

    #[test]
    fn passk_example_n4_neg2_k2() {
        let (m, s, adv) = enumerate_passk(4, 2, 2);
        let st = passk_stats(4, 2, 2).unwrap();
        assert_abs_diff_eq!(st.r_bar_group, 0.833333, epsilon = 1e-6);
        assert_abs_diff_eq!(st.sigma_group, 0.372678, epsilon = 1e-6);
        assert_abs_diff_eq!(st.r_bar_group, m, epsilon = 1e-12);
        assert_abs_diff_eq!(st.sigma_group, s, epsilon = 1e-12);
        let (ap, an) = passk_advantages(&st).unwrap();
        assert_abs_diff_eq!(ap, 0.447214, epsilon = 1e-6);
        assert_abs_diff_eq!(an, -2.236068, epsilon = 1e-6);
        assert_abs_diff_eq!(ap, adv.unwrap().0, epsilon = 1e-12);
        assert_abs_diff_eq!(an, adv.unwrap().1, epsilon = 1e-12);
    }

    #[test]
    fn passk_k1_is_fraction_correct() {
        let st = passk_stats(4, 2, 1).unwrap();
        assert_eq!(st.r_bar_group, 0.5);
        assert_eq!(st.sigma_group, 0.5);
        assert_eq!((st.a_pos, st.a_neg), (1.0, -1.0));
        for n in 2..=12 {
            for neg in 0..=n {
                assert_eq!(
                    passk_stats(n, neg, 1).unwrap().r_bar_group,
                    (n - neg) as f64 / n as f64
                );
            }
        }
    }

    #[test]
    fn passk_all_correct_is_degenerate() {
        let st = passk_stats(4, 0, 2).unwrap();
        assert_eq!((st.r_bar_group, st.sigma_group), (1.0, 0.0));
        assert_eq!(passk_advantages(&st), Err(RewardError::DegenerateGroup));
        // Fewer wrong answers than k: every subset holds a correct one.
        assert!(passk_stats(8, 2, 4).unwrap().is_degenerate());
    }

    #[test]
    fn passk_rejects_bad_k() {
        assert!(passk_stats(4, 1, 5).is_err());
        assert!(passk_stats(4, 1, 0).is_err());
        assert!(passk_stats(4, 5, 2).is_err());
    }

    #[test]
    fn passk_matches_enumeration_up_to_ten() {
        for n in 2..=10 {
            for neg in 1..n {
                for k in 1..=n {
                    let st = passk_stats(n, neg, k).unwrap();
                    let (m, s, adv) = enumerate_passk(n, neg, k);
                    assert!((st.r_bar_group - m).abs() < 1e-9);
                    assert!((st.sigma_group - s).abs() < 1e-9);
                    match adv {
                        Some((ap, an)) => {
                            assert!((st.a_pos - ap).abs() < 1e-9 && (st.a_neg - an).abs() < 1e-9);
                            assert!(st.a_pos > 0.0 && st.a_neg < 0.0);
                        }
                        None => assert!(st.is_degenerate()),
                    }
                }
            }
        }
    }

    #[test]
    fn minority_class_magnitude_grows_as_it_gets_rarer() {
        for n in 3..=10 {
            for k in 1..=n {
                let live: Vec<GroupStats> = (1..n)
                    .map(|neg| passk_stats(n, neg, k).unwrap())
                    .filter(|s| !s.is_degenerate())
                    .collect();
                for w in live.windows(2) {
                    // More wrong answers: correct ones are rarer.
                    assert!(w[1].a_pos > w[0].a_pos);
                    assert!(w[1].a_neg.abs() < w[0].a_neg.abs());
                }
            }
        }
    }

    #[test]
    fn diversity_score_examples() {
        let cfg = table_cfg([[0.0, 0.2, 0.4], [0.2, 0.0, 0.6], [0.4, 0.6, 0.0]], 0.2);
        let div = diversity_scores(&["a", "b", "c"], &cfg).unwrap();
        for (got, want) in div.iter().zip([0.3, 0.4, 0.5]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        let d = DiversityConfig::default();
        assert_eq!(
            diversity_scores(&["x y", "x y", "x y"], &d).unwrap(),
            vec![0.0; 3]
        );
        let delta = d.distance.distance("abcd", "abxy");
        assert_eq!(
            diversity_scores(&["abcd", "abxy"], &d).unwrap(),
            vec![delta, delta]
        );
        assert!(diversity_scores(&["a"], &d).is_err());
    }

    #[test]
    fn fusion_examples() {
        let cfg = DiversityConfig::default();
        let fused = fuse_diversity(&[1.0, 1.0, 0.0], &[0.3, 0.4, 0.5], &cfg).unwrap();
        for (got, want) in fused.iter().zip([0.5, 0.75, 0.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        assert_eq!(
            fuse_diversity(&[1.0, 0.0], &[0.2, 0.2], &cfg).unwrap(),
            vec![1.0, 0.0]
        );
        assert_eq!(
            fuse_diversity(&[0.0, 0.0], &[0.1, 0.9], &cfg).unwrap(),
            vec![0.0, 0.0]
        );
        assert!(fuse_diversity(&[1.0], &[0.1, 0.2], &cfg).is_err());
    }

    #[test]
    fn diversity_advantage_examples() {
        let a = diversity_advantages(&[0.5, 0.75, 0.0]);
        for (got, want) in a.iter().zip([0.083333, 0.333333, -0.416667]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-6);
        }
        assert_eq!(diversity_advantages(&[0.7; 4]), vec![0.0; 4]);
    }

    #[test]
    fn length_reward_examples() {
        let cfg = LengthConfig {
            l_max: 512,
            l_soft: 128,
        };
        assert_eq!(length_reward(300, &cfg), 0.0);
        assert_eq!(length_reward(448, &cfg), -0.5);
        assert_eq!(length_reward(600, &cfg), -1.0);
        assert_eq!(length_reward(384, &cfg), 0.0);
        assert_eq!(length_reward(512, &cfg), -1.0);
        assert!(LengthConfig {
            l_max: 10,
            l_soft: 10
        }
        .validate()
        .is_err());
    }

    #[test]
    fn hybrid_early_phase_matches_passk() {
        let cfg = HybridRewardConfig {
            k: 2,
            ..Default::default()
        };
        let g = group(&[1, 0, 1, 0], &[2; 4]);
        let adv = hybrid_advantage(&g, Phase::EarlyPassk, &cfg).unwrap();
        let want = [0.447214, -2.236068, 0.447214, -2.236068];
        for (got, w) in adv.values.iter().zip(want) {
            assert_abs_diff_eq!(*got, w, epsilon = 1e-6);
        }
        assert!(!adv.degenerate);
    }

    #[test]
    fn hybrid_length_term_is_additive() {
        let cfg = HybridRewardConfig {
            k: 2,
            ..Default::default()
        };
        let short =
            hybrid_advantage(&group(&[1, 0, 1, 0], &[2; 4]), Phase::EarlyPassk, &cfg).unwrap();
        let long = hybrid_advantage(
            &group(&[1, 0, 1, 0], &[600, 2, 2, 2]),
            Phase::EarlyPassk,
            &cfg,
        )
        .unwrap();
        assert_abs_diff_eq!(long.values[0] - short.values[0], -0.5, epsilon = 1e-12);
        assert_eq!(long.values[1..], short.values[1..]);
    }

    #[test]
    fn hybrid_degenerate_and_late_constant() {
        let cfg = HybridRewardConfig::default();
        let adv =
            hybrid_advantage(&group(&[1, 1, 1, 1], &[2; 4]), Phase::EarlyPassk, &cfg).unwrap();
        assert!(adv.degenerate);
        assert_eq!(adv.values, vec![0.0; 4]);
        let late =
            hybrid_advantage(&group(&[1, 1, 1, 1], &[2; 4]), Phase::LateDiversity, &cfg).unwrap();
        assert_eq!(late.values, vec![0.0; 4]);
    }

    #[test]
    fn distinct_count_examples() {
        let d = DiversityConfig::default();
        assert_eq!(distinct_count(&["same", "same", "same"], &d), 1);
        let far = table_cfg([[0.0, 0.9, 0.9], [0.9, 0.0, 0.9], [0.9, 0.9, 0.0]], 0.2);
        assert_eq!(distinct_count(&["a", "b", "c"], &far), 3);
        let near = table_cfg([[0.0, 0.1, 0.9], [0.1, 0.0, 0.9], [0.9, 0.9, 0.0]], 0.2);
        assert_eq!(distinct_count(&["a", "b", "c"], &near), 2);
        assert_eq!(distinct_count(&["c", "b", "a"], &near), 2);
    }

    #[test]
    fn trigram_distance_basics() {
        let d = TrigramCosine;
        assert_eq!(d.distance("abc", "abc"), 0.0);
        assert_eq!(d.distance("abc", "xyz"), 1.0);
        assert_eq!(d.distance("", "abc"), 1.0);
        let x = d.distance("so \\boxed{3}", "\\boxed{7}");
        assert_abs_diff_eq!(
            x,
            d.distance("\\boxed{7}", "so \\boxed{3}"),
            epsilon = 1e-15
        );
        assert!(x > 0.0 && x < 1.0);
    }

    #[test]
    fn final_answer_distance_ignores_phrasing() {
        let d = FinalAnswer;
        assert_eq!(d.distance("well so \\boxed{3}", "\\boxed{03}"), 0.0);
        assert_eq!(d.distance("\\boxed{3}", "\\boxed{7}"), 1.0);
        assert_eq!(
            d.distance("I cannot determine this", "\\boxed{<ABSTAIN>}"),
            0.0
        );
        assert_eq!(d.distance("well", "think"), 0.0);
        assert_eq!(d.distance("well", "\\boxed{1}"), 1.0);
        let texts = [
            "so \\boxed{1}",
            "\\boxed{1}",
            "let \\boxed{2}",
            "\\boxed{1}",
        ];
        let cfg = DiversityConfig {
            distance: Arc::new(FinalAnswer),
            ..DiversityConfig::default()
        };
        assert_eq!(distinct_count(&texts, &cfg), 2);
    }

    struct Scaled(f64, f64);
    impl SemanticDistance for Scaled {
        fn distance(&self, a: &str, b: &str) -> f64 {
            self.0 * TrigramCosine.distance(a, b) + self.1
        }
    }

    proptest! {
        #[test]
        fn diversity_advantages_sum_to_zero(v in prop::collection::vec(0.0f64..1.0, 1..16)) {
            let a = diversity_advantages(&v);
            prop_assert!(a.iter().sum::<f64>().abs() <= 1e-12 * v.len() as f64);
        }

        #[test]
        fn length_reward_monotone(a in 0usize..800, b in 0usize..800) {
            let cfg = LengthConfig::default();
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(length_reward(hi, &cfg) <= length_reward(lo, &cfg));
            let r = length_reward(a, &cfg);
            prop_assert!((-1.0..=0.0).contains(&r));
        }

        #[test]
        fn fusion_invariant_to_affine_distance(
            texts in prop::collection::vec("[ab ]{1,8}", 3..7),
            correct in prop::collection::vec(0u8..2, 7),
            scale in 0.1f64..10.0,
            shift in 0.0f64..2.0,
        ) {
            let base = DiversityConfig::default();
            let scaled = DiversityConfig { distance: Arc::new(Scaled(scale, shift)), ..DiversityConfig::default() };
            // Identical strings would get the shift too, which breaks the affine relation.
            let mut uniq = texts.clone();
            uniq.sort();
            uniq.dedup();
            prop_assume!(uniq.len() == texts.len());
            let rewards: Vec<f64> = correct[..texts.len()].iter().map(|&c| f64::from(c)).collect();
            let f1 = fuse_diversity(&rewards, &diversity_scores(&texts, &base).unwrap(), &base).unwrap();
            let f2 = fuse_diversity(&rewards, &diversity_scores(&texts, &scaled).unwrap(), &scaled).unwrap();
            for (x, y) in f1.iter().zip(&f2) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn clustering_is_deterministic_for_fixed_order(texts in prop::collection::vec("[abc]{1,6}", 1..10)) {
            let cfg = DiversityConfig::default();
            prop_assert_eq!(cluster_responses(&texts, &cfg), cluster_responses(&texts, &cfg));
        }
    }
}
