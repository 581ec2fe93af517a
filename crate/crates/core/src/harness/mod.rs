//! Two-stage training pipeline: online GSPO with phase-switched hybrid
//! advantages, then offline DPO, plus evaluation.
//!
//! Every random draw is seeded from `(config.seed, purpose, indices)`, and
//! parallel work is collected in index order, so results do not depend on
//! the number of worker threads.

mod config;
mod metrics;

use std::collections::{BTreeSet, HashMap};
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    DistanceKind, DiversitySettings, EvalConfig, LogitPrior, ModelConfig, RunConfig,
    ScreenResponder, ScreenSettings, Stage1Config, Stage2Config, SuiteConfig,
};
pub use metrics::{
    mean, metrics_to_csv, percentile, read_metrics_jsonl, write_metrics_jsonl, MetricsRecord, Stage,
};

use crate::curation::{
    fill_batch, screen_tasks, Admission, AdmissionRule, CurationError, CurationRecord,
    PolicyResponder, PromptSolver, RatioEmaState, Responder, ScreenDecision, TierReport,
};
use crate::hashing::derive_seed;
use crate::optim::{
    dpo_loss_grad, gspo_loss_grad, preference_accuracy, GspoGroup, OptimError, Optimizer,
    TokenizedPair,
};
use crate::policy::{
    CheckpointError, Model, PolicyError, PolicyParams, SampleOptions, ABSTAIN_TOKEN, EOS,
};
use crate::reward_engine::{
    distinct_count, hybrid_advantage, HybridRewardConfig, Phase, RewardError, RolloutGroup,
};
use crate::task_forge::{
    ablate_context, gen_ambiguous_tasks, gen_arith_tasks, gen_context_tasks, make_preference_pairs,
    mix_text_only, PreferencePair, Task, TaskError, ABLATED_SUFFIX,
};
use crate::verifier::{verify, VerdictReason};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Curation(#[from] CurationError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Optim(OptimError),
}

impl From<OptimError> for HarnessError {
    fn from(e: OptimError) -> Self {
        match e {
            OptimError::NonFiniteGradient { .. } | OptimError::NonFiniteAdvantage(_) => {
                HarnessError::Numeric(e.to_string())
            }
            OptimError::Config(msg) => HarnessError::Config(msg),
            other => HarnessError::Optim(other),
        }
    }
}

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Task(_) => 2,
            HarnessError::Numeric(_) => 3,
            _ => 1,
        }
    }
}

/// Execution settings that must not influence results.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub workers: usize,
    /// Record wall-clock time per iteration (makes metrics non-reproducible).
    pub timing: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            timing: false,
        }
    }
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, HarnessError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Suite {
    /// Stage-1 task pool before leakage screening.
    pub train: Vec<Task>,
    /// Evidence-bearing tasks with their context, as generated.
    pub context: Vec<Task>,
    /// Fixed multi-answer probes for the distinct-answer metric.
    pub probes: Vec<Task>,
}

pub fn build_suite(cfg: &RunConfig) -> Result<Suite, HarnessError> {
    let s = &cfg.suite;
    let mut base = Vec::new();
    if s.arith_count > 0 {
        base.extend(gen_arith_tasks(
            s.arith_count,
            s.modulus,
            derive_seed(cfg.seed, "arith", &[]),
        )?);
    }
    let context = if s.context_count > 0 {
        gen_context_tasks(
            s.context_count,
            s.modulus,
            s.leak_fraction,
            derive_seed(cfg.seed, "context", &[]),
        )?
    } else {
        Vec::new()
    };
    base.extend(context.iter().cloned());
    let n_ablate = ((s.ablation_fraction * context.len() as f64) + 1e-9).floor() as usize;
    if n_ablate > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "ablate", &[]));
        let mut picks = index::sample(&mut rng, context.len(), n_ablate).into_vec();
        picks.sort_unstable();
        for i in picks {
            base.push(ablate_context(&context[i])?);
        }
    }
    let probes = gen_ambiguous_tasks(s.modulus)?;
    if s.train_on_probes {
        base.extend(probes.iter().cloned());
    }
    let train = mix_text_only(
        &base,
        s.text_only_fraction,
        derive_seed(cfg.seed, "text-only", &[]),
    )?;
    Ok(Suite {
        train,
        context,
        probes,
    })
}

pub fn build_model(cfg: &RunConfig) -> Model {
    Model::new(
        cfg.suite.modulus,
        cfg.model.prompt_buckets,
        cfg.model.context_buckets,
    )
    .with_answer_budget(cfg.model.force_answer.then_some(cfg.sampling.max_len))
}

/// Seeded initial policy with the configured prior and frozen block.
pub fn init_params(cfg: &RunConfig, model: &Model) -> Result<PolicyParams, HarnessError> {
    let mut params = model.init_params(derive_seed(cfg.seed, "init", &[]))?;
    // `init_params` draws from [-0.01, 0.01].
    let rescale = cfg.model.init_scale / 0.01;
    params.weights_mut().iter_mut().for_each(|w| *w *= rescale);
    apply_prior(model, &mut params, &cfg.model.prior)?;
    if cfg.model.freeze_context_block {
        params.freeze_columns(model.layout.context_block());
    }
    Ok(params)
}

/// Adds the logit offsets of `prior` to existing parameters, e.g. to make a
/// trained policy verbose.
pub fn apply_prior(
    model: &Model,
    params: &mut PolicyParams,
    prior: &LogitPrior,
) -> Result<(), HarnessError> {
    model.check_params(params)?;
    let bias = model.layout.bias_index();
    let mut add = |token: usize, feature: usize, delta: f64| {
        let w = params.weight(token, feature);
        params.set_weight(token, feature, w + delta);
    };
    add(EOS as usize, bias, prior.eos);
    add(ABSTAIN_TOKEN as usize, bias, prior.abstain);
    for v in 0..model.vocab.n_answers() {
        let t = model.vocab.answer_token(v).expect("value below n_answers") as usize;
        add(t, bias, prior.answer);
        add(
            EOS as usize,
            model.layout.last_token_index(Some(t as u32)),
            prior.eos_after_answer,
        );
    }
    for t in model.vocab.filler_tokens().collect::<Vec<_>>() {
        add(t as usize, bias, prior.filler);
    }
    Ok(())
}

/// Screens the suite's evidence-bearing tasks; returns the records and the
/// ids of leaked tasks.
pub fn screen_suite(
    cfg: &RunConfig,
    suite: &Suite,
    model: &Model,
    params: &PolicyParams,
) -> Result<(Vec<CurationRecord>, BTreeSet<String>), HarnessError> {
    if !cfg.screen.enabled || suite.context.is_empty() {
        return Ok((Vec::new(), BTreeSet::new()));
    }
    let seed = derive_seed(cfg.seed, "screen", &[]);
    let solver = PromptSolver { seed };
    let policy = PolicyResponder {
        model,
        params,
        opts: cfg.sampling,
        seed,
    };
    let responder: &dyn Responder = match cfg.screen.responder {
        ScreenResponder::PromptSolver => &solver,
        ScreenResponder::InitialPolicy => &policy,
    };
    let records = screen_tasks(&suite.context, responder, &cfg.screen.to_config())?;
    let leaked = records
        .iter()
        .filter(|r| r.decision == ScreenDecision::Leaked)
        .map(|r| r.task_id.clone())
        .collect();
    Ok((records, leaked))
}

/// A task is excluded if it, or the task it was ablated from, leaked.
pub fn is_leaked(task_id: &str, leaked: &BTreeSet<String>) -> bool {
    leaked.contains(task_id)
        || task_id
            .strip_suffix(ABLATED_SUFFIX)
            .is_some_and(|base| leaked.contains(base))
}

/// Samples `n` responses to `task` and scores them with the verifier.
pub fn rollout_group(
    model: &Model,
    params: &PolicyParams,
    task: &Task,
    n: usize,
    opts: &SampleOptions,
    seed: u64,
) -> Result<RolloutGroup, HarnessError> {
    let rollouts = (0..n)
        .map(|j| {
            model.sample(
                params,
                task,
                opts,
                derive_seed(seed, "rollout", &[j as u64]),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let correctness = rollouts
        .iter()
        .map(|r| verify(&r.text, &task.ground_truth).reward)
        .collect();
    Ok(RolloutGroup::new(&task.id, rollouts, correctness)?)
}

/// Weighted draws without replacement, in passes over the pool when more
/// draws than tasks are needed.
fn sample_tasks(weights: &[f64], count: usize, seed: u64) -> Result<Vec<usize>, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let take = (count - out.len()).min(weights.len());
        let picks = index::sample_weighted(&mut rng, weights.len(), |i| weights[i], take)
            .map_err(|e| HarnessError::Config(format!("task weights: {e}")))?;
        out.extend(picks);
    }
    Ok(out)
}

/// Fraction of tasks whose greedy response verifies.
pub fn greedy_accuracy(
    model: &Model,
    params: &PolicyParams,
    tasks: &[&Task],
    opts: &SampleOptions,
) -> Result<f64, HarnessError> {
    if tasks.is_empty() {
        return Ok(0.0);
    }
    let correct: usize = tasks
        .par_iter()
        .map(|t| {
            let r = model.greedy(params, t, opts)?;
            Ok(usize::from(verify(&r.text, &t.ground_truth).is_correct()))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / tasks.len() as f64)
}

/// Mean number of distinct answers among `samples` draws per probe.
pub fn probe_distinct(
    cfg: &RunConfig,
    model: &Model,
    params: &PolicyParams,
    probes: &[Task],
    seed: u64,
) -> Result<Option<f64>, HarnessError> {
    if probes.is_empty() {
        return Ok(None);
    }
    let diversity = cfg.diversity.to_config();
    let counts = probes
        .par_iter()
        .map(|t| {
            let texts = (0..cfg.eval.probe_samples)
                .map(|j| {
                    Ok(model
                        .sample(
                            params,
                            t,
                            &cfg.sampling,
                            derive_seed(seed, &t.id, &[j as u64]),
                        )?
                        .text)
                })
                .collect::<Result<Vec<_>, HarnessError>>()?;
            Ok(distinct_count(&texts, &diversity))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(Some(
        counts.iter().sum::<usize>() as f64 / counts.len() as f64,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Output {
    pub metrics: Vec<MetricsRecord>,
    pub params: PolicyParams,
    pub curation: Vec<CurationRecord>,
    pub leaked: BTreeSet<String>,
    /// Task ids of the groups used for each update, per iteration.
    pub batches: Vec<Vec<String>>,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
}

pub fn run_stage1(cfg: &RunConfig, opts: &RunOptions) -> Result<Stage1Output, HarnessError> {
    cfg.validate()?;
    let model = build_model(cfg);
    let params = init_params(cfg, &model)?;
    run_stage1_from(cfg, opts, params)
}

/// Admission for one group: the correctness rule first, then groups whose
/// advantages are all zero (including degenerate Pass@k groups) are dropped.
pub fn classify_group(
    group: &RolloutGroup,
    phase: Phase,
    rule: AdmissionRule,
    hybrid: &HybridRewardConfig,
) -> Result<Admission, HarnessError> {
    let verdict = rule.classify(group);
    if verdict != Admission::Keep {
        return Ok(verdict);
    }
    let adv = hybrid_advantage(group, phase, hybrid)?;
    Ok(if adv.degenerate || adv.values.iter().all(|&a| a == 0.0) {
        Admission::NoSignal
    } else {
        Admission::Keep
    })
}

/// Stage 1 starting from given parameters.
pub fn run_stage1_from(
    cfg: &RunConfig,
    opts: &RunOptions,
    params: PolicyParams,
) -> Result<Stage1Output, HarnessError> {
    cfg.validate()?;
    let model = build_model(cfg);
    model.check_params(&params)?;
    with_pool(opts.workers, || stage1(cfg, opts, &model, params))?
}

fn stage1(
    cfg: &RunConfig,
    opts: &RunOptions,
    model: &Model,
    mut params: PolicyParams,
) -> Result<Stage1Output, HarnessError> {
    let suite = build_suite(cfg)?;
    let (curation, leaked) = screen_suite(cfg, &suite, model, &params)?;
    let pool: Vec<&Task> = suite
        .train
        .iter()
        .filter(|t| !is_leaked(&t.id, &leaked))
        .collect();
    if pool.is_empty() {
        return Err(HarnessError::Config(
            "every task was excluded by the leakage screen".into(),
        ));
    }
    let by_id: HashMap<&str, &Task> = pool.iter().map(|t| (t.id.as_str(), *t)).collect();
    let hybrid = cfg.hybrid();
    let s1 = &cfg.stage1;
    let switch_at = ((cfg.phase_switch_fraction * s1.iterations as f64) + 1e-9).floor() as usize;

    let mut snapshot = params.clone();
    let mut optimizer = Optimizer::new(cfg.optim)?;
    let mut ema = RatioEmaState::from_config(&cfg.ratio_ema)?;
    let mut tiers = TierReport::default();
    let initial_accuracy = greedy_accuracy(model, &params, &pool, &cfg.sampling)?;
    let mut final_accuracy = initial_accuracy;
    let mut best = initial_accuracy;
    let mut stale = 0usize;
    let mut metrics = Vec::with_capacity(s1.iterations);
    let mut batches = Vec::with_capacity(s1.iterations);

    for it in 0..s1.iterations {
        let started = opts.timing.then(Instant::now);
        let phase = if it < switch_at {
            Phase::EarlyPassk
        } else {
            Phase::LateDiversity
        };
        let rule = match phase {
            Phase::EarlyPassk => AdmissionRule::MixedOnly,
            Phase::LateDiversity => cfg.late_admission,
        };
        let weights: Vec<f64> = pool
            .iter()
            .map(|t| {
                if cfg.use_tier_weights {
                    cfg.tier_weights.weight(tiers.tier(&t.id))
                } else {
                    1.0
                }
            })
            .collect();
        let mut lengths = Vec::new();
        let classify = |g: &RolloutGroup| classify_group(g, phase, rule, &hybrid);
        let fill = fill_batch(
            &mut ema,
            cfg.groups_per_batch,
            cfg.ratio_ema.max_topup_rounds,
            classify,
            |offset, count| {
                let picks = sample_tasks(
                    &weights,
                    count,
                    derive_seed(cfg.seed, "stage1-tasks", &[it as u64, offset as u64]),
                )?;
                let groups = picks
                    .par_iter()
                    .enumerate()
                    .map(|(j, &ti)| {
                        let task = pool[ti];
                        let seed =
                            derive_seed(cfg.seed, &task.id, &[it as u64, (offset + j) as u64]);
                        rollout_group(model, &snapshot, task, cfg.n_rollout, &cfg.sampling, seed)
                    })
                    .collect::<Result<Vec<_>, HarnessError>>()?;
                for g in &groups {
                    tiers.record(&g.task_id, g.accuracy());
                    lengths.extend(g.rollouts.iter().map(|r| r.length));
                }
                Ok::<_, HarnessError>(groups)
            },
        )?;

        let advantages = fill
            .kept
            .iter()
            .map(|g| hybrid_advantage(g, phase, &hybrid))
            .collect::<Result<Vec<_>, _>>()?;
        let batch: Vec<GspoGroup<'_>> = fill
            .kept
            .iter()
            .zip(&advantages)
            .map(|(g, a)| GspoGroup {
                task: by_id[g.task_id.as_str()],
                group: g,
                advantages: &a.values,
            })
            .collect();
        let n_adv: usize = advantages.iter().map(|a| a.values.len()).sum();
        let mean_abs_advantage = (n_adv > 0).then(|| {
            advantages
                .iter()
                .flat_map(|a| &a.values)
                .map(|x| x.abs())
                .sum::<f64>()
                / n_adv as f64
        });

        let mut record = MetricsRecord::new(Stage::Stage1, it);
        if !batch.is_empty() {
            for epoch in 0..s1.epochs_per_batch {
                let out =
                    gspo_loss_grad(model, &params, &batch, &cfg.clip, cfg.sampling.temperature)?;
                if !out.loss.is_finite() {
                    return Err(HarnessError::Numeric(format!(
                        "GSPO loss {} at iteration {it}",
                        out.loss
                    )));
                }
                let report = optimizer.apply_update(&mut params, &out.grad)?;
                if epoch == 0 {
                    record.loss = out.loss;
                    record.clip_fraction = Some(out.clip_fraction);
                }
                record.grad_norm = report.grad_norm;
            }
        }
        if (it + 1) % s1.snapshot_interval == 0 {
            snapshot = params.clone();
        }

        let last = it + 1 == s1.iterations;
        if (it + 1) % s1.eval_interval == 0 || last {
            let acc = greedy_accuracy(model, &params, &pool, &cfg.sampling)?;
            record.greedy_accuracy = Some(acc);
            record.distinct_count = probe_distinct(
                cfg,
                model,
                &params,
                &suite.probes,
                derive_seed(cfg.seed, "probe", &[it as u64]),
            )?;
            final_accuracy = acc;
            if acc > best {
                best = acc;
                stale = 0;
            } else {
                stale += 1;
            }
        }

        let ids: Vec<String> = fill.kept.iter().map(|g| g.task_id.clone()).collect();
        record.phase = Some(phase);
        record.policy_version = params.version();
        record.mean_length = mean(&lengths);
        record.p95_length = percentile(&lengths, 0.95);
        record.informative_fraction = Some(fill.admitted as f64 / fill.sampled.max(1) as f64);
        record.rho = Some(ema.rho);
        record.groups_sampled = Some(fill.sampled);
        record.batch_groups = Some(fill.kept.len());
        record.batch_filled = Some(fill.filled);
        record.mean_abs_advantage = mean_abs_advantage;
        record.leaked_in_batch = Some(ids.iter().filter(|id| is_leaked(id, &leaked)).count());
        record.wall_ms = started.map(|t| t.elapsed().as_millis() as u64);
        metrics.push(record);
        batches.push(ids);

        if s1.patience.is_some_and(|p| stale >= p) {
            break;
        }
    }
    if metrics.last().is_some_and(|r| r.greedy_accuracy.is_none()) {
        final_accuracy = greedy_accuracy(model, &params, &pool, &cfg.sampling)?;
    }
    Ok(Stage1Output {
        metrics,
        params,
        curation,
        leaked,
        batches,
        initial_accuracy,
        final_accuracy,
    })
}

/// Preference pairs split by task into training and held-out sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceData {
    pub tasks: Vec<Task>,
    pub train: Vec<PreferencePair>,
    pub heldout: Vec<PreferencePair>,
}

/// Pairs for every single-answer task in the suite plus an abstention pair
/// for the evidence-ablated variant of every clean context task.
pub fn build_preference_data(cfg: &RunConfig) -> Result<PreferenceData, HarnessError> {
    cfg.validate()?;
    let suite = build_suite(cfg)?;
    let model = build_model(cfg);
    let params = init_params(cfg, &model)?;
    let (_, leaked) = screen_suite(cfg, &suite, &model, &params)?;
    let mut tasks: Vec<Task> = suite
        .train
        .iter()
        .filter(|t| !t.tags.contains("ambiguous") && !t.is_ablated() && !is_leaked(&t.id, &leaked))
        .cloned()
        .collect();
    for t in suite.context.iter().filter(|t| !leaked.contains(&t.id)) {
        tasks.push(ablate_context(t)?);
    }
    if tasks.is_empty() {
        return Err(HarnessError::Config(
            "no tasks available for preference pairs".into(),
        ));
    }
    let pairs = make_preference_pairs(&tasks, derive_seed(cfg.seed, "pairs", &[]))?;
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed,
        "pair-split",
        &[],
    )));
    let n_heldout = ((cfg.stage2.heldout_fraction * tasks.len() as f64) + 1e-9).floor() as usize;
    let heldout_ids: BTreeSet<&str> = order[..n_heldout]
        .iter()
        .map(|&i| tasks[i].id.as_str())
        .collect();
    let (heldout, train): (Vec<_>, Vec<_>) = pairs
        .into_iter()
        .partition(|p| heldout_ids.contains(p.task_id.as_str()));
    Ok(PreferenceData {
        tasks,
        train,
        heldout,
    })
}

fn tokenize_pairs<'a>(
    model: &Model,
    by_id: &HashMap<&str, &'a Task>,
    pairs: &[PreferencePair],
) -> Result<Vec<TokenizedPair<'a>>, HarnessError> {
    pairs
        .iter()
        .map(|p| {
            let task = by_id.get(p.task_id.as_str()).ok_or_else(|| {
                HarnessError::Config(format!("preference pair for unknown task `{}`", p.task_id))
            })?;
            Ok(TokenizedPair {
                task,
                chosen: model.vocab.tokenize(&p.chosen)?,
                rejected: model.vocab.tokenize(&p.rejected)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Output {
    pub metrics: Vec<MetricsRecord>,
    pub params: PolicyParams,
    pub initial_preference_accuracy: f64,
    pub initial_heldout_accuracy: Option<f64>,
}

pub fn run_stage2(
    cfg: &RunConfig,
    opts: &RunOptions,
    params: PolicyParams,
    data: &PreferenceData,
) -> Result<Stage2Output, HarnessError> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(OptimError::EmptyPairs.into());
    }
    // Offline pairs are fixed text, not samples under the decoding budget.
    let model = build_model(cfg).with_answer_budget(None);
    model.check_params(&params)?;
    with_pool(opts.workers, || stage2(cfg, opts, &model, params, data))?
}

fn stage2(
    cfg: &RunConfig,
    opts: &RunOptions,
    model: &Model,
    mut params: PolicyParams,
    data: &PreferenceData,
) -> Result<Stage2Output, HarnessError> {
    let by_id: HashMap<&str, &Task> = data.tasks.iter().map(|t| (t.id.as_str(), t)).collect();
    let train = tokenize_pairs(model, &by_id, &data.train)?;
    let heldout = tokenize_pairs(model, &by_id, &data.heldout)?;
    let s2 = &cfg.stage2;
    let beta = s2.optim.beta;
    let mut optimizer = Optimizer::new(s2.optim)?;
    let initial_preference_accuracy = preference_accuracy(model, &params, &train)?;
    let initial_heldout_accuracy = (!heldout.is_empty())
        .then(|| preference_accuracy(model, &params, &heldout))
        .transpose()?;
    let mut metrics = Vec::with_capacity(s2.epochs);
    for epoch in 0..s2.epochs {
        let started = opts.timing.then(Instant::now);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            "stage2-order",
            &[epoch as u64],
        )));
        let mut loss = 0.0;
        let mut grad_norm = 0.0;
        for chunk in order.chunks(s2.batch_size) {
            let batch: Vec<TokenizedPair<'_>> = chunk.iter().map(|&i| train[i].clone()).collect();
            let out = dpo_loss_grad(model, &params, &batch, beta)?;
            if !out.loss.is_finite() {
                return Err(HarnessError::Numeric(format!(
                    "DPO loss {} in epoch {epoch}",
                    out.loss
                )));
            }
            grad_norm = optimizer.apply_update(&mut params, &out.grad)?.grad_norm;
            loss += out.loss * chunk.len() as f64 / train.len() as f64;
        }
        let mut record = MetricsRecord::new(Stage::Stage2, epoch);
        record.loss = loss;
        record.grad_norm = grad_norm;
        record.policy_version = params.version();
        record.preference_accuracy = Some(preference_accuracy(model, &params, &train)?);
        record.heldout_preference_accuracy = (!heldout.is_empty())
            .then(|| preference_accuracy(model, &params, &heldout))
            .transpose()?;
        record.wall_ms = started.map(|t| t.elapsed().as_millis() as u64);
        metrics.push(record);
    }
    Ok(Stage2Output {
        metrics,
        params,
        initial_preference_accuracy,
        initial_heldout_accuracy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthSummary {
    pub samples: usize,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_tasks: usize,
    pub greedy_accuracy: f64,
    /// Mean verifier reward of sampled responses.
    pub sampled_accuracy: f64,
    pub n_ablated: usize,
    /// Share of ablated tasks whose greedy response abstains.
    pub abstention_rate: Option<f64>,
    pub distinct_count: Option<f64>,
    pub length: Option<LengthSummary>,
}

/// Greedy accuracy, abstention on ablated tasks, probe diversity and the
/// sampled length distribution of a policy.
pub fn evaluate(
    cfg: &RunConfig,
    params: &PolicyParams,
    tasks: &[Task],
    probes: &[Task],
    opts: &RunOptions,
) -> Result<EvalReport, HarnessError> {
    let model = build_model(cfg);
    model.check_params(params)?;
    with_pool(opts.workers, || {
        evaluate_in(cfg, &model, params, tasks, probes)
    })?
}

fn evaluate_in(
    cfg: &RunConfig,
    model: &Model,
    params: &PolicyParams,
    tasks: &[Task],
    probes: &[Task],
) -> Result<EvalReport, HarnessError> {
    let seed = derive_seed(cfg.seed, "eval", &[]);
    let per_task = tasks
        .par_iter()
        .map(|t| {
            let g = model.greedy(params, t, &cfg.sampling)?;
            let verdict = verify(&g.text, &t.ground_truth);
            let mut lengths = Vec::with_capacity(cfg.eval.length_samples);
            let mut correct = 0usize;
            for j in 0..cfg.eval.length_samples {
                let r = model.sample(
                    params,
                    t,
                    &cfg.sampling,
                    derive_seed(seed, &t.id, &[j as u64]),
                )?;
                correct += usize::from(verify(&r.text, &t.ground_truth).is_correct());
                lengths.push(r.length);
            }
            Ok((verdict, lengths, correct))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;

    let n = tasks.len();
    let greedy_correct = per_task.iter().filter(|(v, _, _)| v.is_correct()).count();
    let lengths: Vec<usize> = per_task
        .iter()
        .flat_map(|(_, l, _)| l.iter().copied())
        .collect();
    let sampled_correct: usize = per_task.iter().map(|(_, _, c)| c).sum();
    let ablated: Vec<usize> = (0..n).filter(|&i| tasks[i].is_ablated()).collect();
    let abstained = ablated
        .iter()
        .filter(|&&i| per_task[i].0.reason == VerdictReason::AbstainMatch)
        .count();
    let length = (!lengths.is_empty()).then(|| LengthSummary {
        samples: lengths.len(),
        mean: mean(&lengths).unwrap_or(0.0),
        p50: percentile(&lengths, 0.5).unwrap_or(0.0),
        p95: percentile(&lengths, 0.95).unwrap_or(0.0),
        max: lengths.iter().copied().max().unwrap_or(0) as f64,
    });
    Ok(EvalReport {
        n_tasks: n,
        greedy_accuracy: if n > 0 {
            greedy_correct as f64 / n as f64
        } else {
            0.0
        },
        sampled_accuracy: if lengths.is_empty() {
            0.0
        } else {
            sampled_correct as f64 / lengths.len() as f64
        },
        n_ablated: ablated.len(),
        abstention_rate: (!ablated.is_empty()).then(|| abstained as f64 / ablated.len() as f64),
        distinct_count: probe_distinct(cfg, model, params, probes, seed)?,
        length,
    })
}
