use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::curation::{AdmissionRule, RatioEmaConfig, ScreenConfig, TierWeights};
use crate::optim::{ClipConfig, OptimConfig};
use crate::policy::SampleOptions;
use crate::reward_engine::{
    DiversityConfig, FinalAnswer, HybridRewardConfig, LengthConfig, SemanticDistance, TrigramCosine,
};

/// Full run configuration. Every field has a default, so a config file
/// only lists what it changes; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub suite: SuiteConfig,
    pub model: ModelConfig,
    pub sampling: SampleOptions,
    pub n_rollout: usize,
    pub groups_per_batch: usize,
    pub k: usize,
    /// Fraction of Stage-1 iterations spent in the Pass@k phase.
    pub phase_switch_fraction: f64,
    /// Admission rule once the diversity phase starts.
    pub late_admission: AdmissionRule,
    pub diversity: DiversitySettings,
    pub length: LengthConfig,
    pub w_len: f64,
    pub clip: ClipConfig,
    pub optim: OptimConfig,
    pub ratio_ema: RatioEmaConfig,
    pub tier_weights: TierWeights,
    pub use_tier_weights: bool,
    pub screen: ScreenSettings,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            suite: SuiteConfig::default(),
            model: ModelConfig::default(),
            sampling: SampleOptions::default(),
            n_rollout: 8,
            groups_per_batch: 8,
            k: 4,
            phase_switch_fraction: 0.4,
            late_admission: AdmissionRule::AnyCorrect,
            diversity: DiversitySettings::default(),
            length: LengthConfig::default(),
            w_len: 0.5,
            clip: ClipConfig::default(),
            optim: OptimConfig {
                learning_rate: 8.0,
                momentum: 0.0,
                max_grad_norm: 0.75,
                ..OptimConfig::default()
            },
            ratio_ema: RatioEmaConfig::default(),
            tier_weights: TierWeights::default(),
            use_tier_weights: true,
            screen: ScreenSettings::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub arith_count: usize,
    pub modulus: u32,
    pub context_count: usize,
    /// Fraction of context tasks whose prompt restates the evidence.
    pub leak_fraction: f64,
    pub text_only_fraction: f64,
    /// Fraction of context tasks added to the pool as evidence-ablated variants.
    pub ablation_fraction: f64,
    /// Train on the ambiguous multi-answer probes as well.
    pub train_on_probes: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            arith_count: 200,
            modulus: 10,
            context_count: 0,
            leak_fraction: 0.0,
            text_only_fraction: 0.0,
            ablation_fraction: 0.0,
            train_on_probes: false,
        }
    }
}

/// Initial logit offsets on the bias feature (and on "previous token was an
/// answer" for the EOS row). Zero by default; a negative `eos` with a
/// positive `filler` gives a verbose starting policy.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogitPrior {
    pub eos: f64,
    pub abstain: f64,
    pub answer: f64,
    pub filler: f64,
    pub eos_after_answer: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub prompt_buckets: usize,
    pub context_buckets: usize,
    pub init_scale: f64,
    /// Keep the evidence-word block at its initial values.
    pub freeze_context_block: bool,
    /// The last position of the sampling budget only admits an answer or
    /// an abstention.
    pub force_answer: bool,
    pub prior: LogitPrior,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            prompt_buckets: 4096,
            context_buckets: 64,
            init_scale: 0.01,
            freeze_context_block: true,
            force_answer: true,
            prior: LogitPrior::default(),
        }
    }
}

/// Serializable part of the diversity configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiversitySettings {
    pub distance: DistanceKind,
    pub norm_lo: f64,
    pub norm_hi: f64,
    pub similarity_threshold: f64,
}

impl Default for DiversitySettings {
    fn default() -> Self {
        let d = DiversityConfig::default();
        Self {
            distance: DistanceKind::FinalAnswer,
            norm_lo: d.norm_lo,
            norm_hi: d.norm_hi,
            similarity_threshold: d.similarity_threshold,
        }
    }
}

impl DiversitySettings {
    pub fn to_config(self) -> DiversityConfig {
        let distance: Arc<dyn SemanticDistance> = match self.distance {
            DistanceKind::TrigramCosine => Arc::new(TrigramCosine),
            DistanceKind::FinalAnswer => Arc::new(FinalAnswer),
        };
        DiversityConfig {
            distance,
            norm_lo: self.norm_lo,
            norm_hi: self.norm_hi,
            similarity_threshold: self.similarity_threshold,
        }
    }
}

/// Distance used for diversity rewards and distinct counts. Filler words in
/// toy responses carry no meaning, so by default only the final answer counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    TrigramCosine,
    FinalAnswer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScreenResponder {
    PromptSolver,
    InitialPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScreenSettings {
    pub enabled: bool,
    pub responder: ScreenResponder,
    pub n_trials: usize,
    pub threshold: f64,
}

impl Default for ScreenSettings {
    fn default() -> Self {
        let c = ScreenConfig::default();
        Self {
            enabled: true,
            responder: ScreenResponder::PromptSolver,
            n_trials: c.n_trials,
            threshold: c.threshold,
        }
    }
}

impl ScreenSettings {
    pub fn to_config(self) -> ScreenConfig {
        ScreenConfig {
            n_trials: self.n_trials,
            threshold: self.threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub iterations: usize,
    /// Iterations between refreshes of the rollout (old) policy.
    pub snapshot_interval: usize,
    /// GSPO steps taken on each batch.
    pub epochs_per_batch: usize,
    /// Iterations between greedy-accuracy and probe evaluations.
    pub eval_interval: usize,
    /// Stop after this many evaluations without accuracy improvement.
    pub patience: Option<usize>,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            iterations: 500,
            snapshot_interval: 1,
            epochs_per_batch: 1,
            eval_interval: 25,
            patience: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub heldout_fraction: f64,
    pub optim: OptimConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            heldout_fraction: 0.2,
            optim: OptimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Samples per ambiguous probe when counting distinct answers.
    pub probe_samples: usize,
    /// Samples per task for the length distribution.
    pub length_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe_samples: 16,
            length_samples: 4,
        }
    }
}

fn check(ok: bool, msg: impl Into<String>) -> Result<(), HarnessError> {
    if ok {
        Ok(())
    } else {
        Err(HarnessError::Config(msg.into()))
    }
}

fn fraction(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hybrid(&self) -> HybridRewardConfig {
        HybridRewardConfig {
            k: self.k,
            diversity: self.diversity.to_config(),
            length: self.length,
            w_len: self.w_len,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let cfg_err = |e: &dyn std::fmt::Display| HarnessError::Config(e.to_string());
        let s = &self.suite;
        check(s.modulus >= 2, "suite.modulus must be >= 2")?;
        check(
            s.arith_count + s.context_count > 0,
            "suite must contain at least one task",
        )?;
        for (name, x) in [
            ("leak_fraction", s.leak_fraction),
            ("text_only_fraction", s.text_only_fraction),
            ("ablation_fraction", s.ablation_fraction),
        ] {
            check(fraction(x), format!("suite.{name} must be in [0, 1]"))?;
        }
        check(
            self.model.prompt_buckets >= 1,
            "model.prompt_buckets must be >= 1",
        )?;
        check(
            self.model.init_scale >= 0.0 && self.model.init_scale.is_finite(),
            "model.init_scale must be finite and >= 0",
        )?;
        let p = self.model.prior;
        check(
            [p.eos, p.abstain, p.answer, p.filler, p.eos_after_answer]
                .iter()
                .all(|x| x.is_finite()),
            "model.prior entries must be finite",
        )?;
        check(self.sampling.max_len >= 1, "sampling.max_len must be >= 1")?;
        check(
            self.sampling.temperature > 0.0 && self.sampling.temperature.is_finite(),
            "sampling.temperature must be positive",
        )?;
        check(self.n_rollout >= 2, "n_rollout must be >= 2")?;
        check(self.groups_per_batch >= 1, "groups_per_batch must be >= 1")?;
        check(
            self.k >= 1 && self.k <= self.n_rollout,
            "k must be in [1, n_rollout]",
        )?;
        check(
            fraction(self.phase_switch_fraction),
            "phase_switch_fraction must be in [0, 1]",
        )?;
        self.diversity
            .to_config()
            .validate()
            .map_err(|e| cfg_err(&e))?;
        self.length.validate().map_err(|e| cfg_err(&e))?;
        check(
            self.w_len >= 0.0 && self.w_len.is_finite(),
            "w_len must be >= 0",
        )?;
        self.clip.validate().map_err(|e| cfg_err(&e))?;
        self.optim.validate().map_err(|e| cfg_err(&e))?;
        self.stage2.optim.validate().map_err(|e| cfg_err(&e))?;
        crate::curation::RatioEmaState::from_config(&self.ratio_ema).map_err(|e| cfg_err(&e))?;
        self.tier_weights.validate().map_err(|e| cfg_err(&e))?;
        check(self.screen.n_trials >= 1, "screen.n_trials must be >= 1")?;
        check(
            fraction(self.screen.threshold),
            "screen.threshold must be in [0, 1]",
        )?;
        check(
            self.stage1.snapshot_interval >= 1,
            "stage1.snapshot_interval must be >= 1",
        )?;
        check(
            self.stage1.epochs_per_batch >= 1,
            "stage1.epochs_per_batch must be >= 1",
        )?;
        check(
            self.stage1.eval_interval >= 1,
            "stage1.eval_interval must be >= 1",
        )?;
        check(
            self.stage1.patience != Some(0),
            "stage1.patience must be >= 1 when set",
        )?;
        check(
            self.stage2.batch_size >= 1,
            "stage2.batch_size must be >= 1",
        )?;
        check(
            self.stage2.heldout_fraction >= 0.0 && self.stage2.heldout_fraction < 1.0,
            "stage2.heldout_fraction must be in [0, 1)",
        )?;
        check(
            self.eval.probe_samples >= 1,
            "eval.probe_samples must be >= 1",
        )?;
        Ok(())
    }
}
