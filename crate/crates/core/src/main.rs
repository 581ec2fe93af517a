use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hybrid_rlvr::curation::write_curation_jsonl;
use hybrid_rlvr::harness::{
    apply_prior, build_model, build_preference_data, build_suite, evaluate, init_params,
    metrics_to_csv, read_metrics_jsonl, run_stage1_from, run_stage2, screen_suite,
    write_metrics_jsonl, HarnessError, PreferenceData, RunConfig, RunOptions,
};
use hybrid_rlvr::policy::{load_checkpoint, save_checkpoint, PolicyParams};
use hybrid_rlvr::task_forge::{ablate_context, write_tasks_jsonl, Task};

#[derive(Parser)]
#[command(
    name = "hybrid-rlvr",
    version,
    about = "Hybrid-reward RLVR training on a toy policy"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write the task suite, probes and preference pairs as JSONL.
    GenTasks(Common),
    /// Run the leakage screen over evidence-bearing tasks.
    Screen(Common),
    /// Online GSPO training; writes metrics, curation records and a checkpoint.
    TrainStage1 {
        #[command(flatten)]
        common: Common,
        /// Start from this checkpoint instead of a fresh policy.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Add the configured logit prior on top of the `--init` checkpoint.
        #[arg(long, requires = "init")]
        apply_prior: bool,
        /// Record wall-clock time per iteration (breaks byte-identical reruns).
        #[arg(long)]
        timing: bool,
    },
    /// Offline DPO on preference pairs, starting from a checkpoint.
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Preference data JSON as written by gen-tasks; generated when omitted.
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        timing: bool,
    },
    /// Evaluate a checkpoint on the suite, its ablated variants and the probes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Render a metrics JSONL file as CSV.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, HarnessError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, HarnessError> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), HarnessError> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| HarnessError::Io(e.into()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn opts(common: &Common, timing: bool) -> RunOptions {
    RunOptions {
        workers: common.workers,
        timing,
    }
}

fn load_params(cfg: &RunConfig, path: Option<&Path>) -> Result<PolicyParams, HarnessError> {
    match path {
        Some(p) => Ok(load_checkpoint(p)?),
        None => init_params(cfg, &build_model(cfg)),
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::GenTasks(common) => {
            let cfg = load_config(&common)?;
            let suite = build_suite(&cfg)?;
            let mut w = create(&common.out_dir, "tasks.jsonl")?;
            write_tasks_jsonl(&mut w, &suite.train)?;
            w.flush()?;
            let mut w = create(&common.out_dir, "probes.jsonl")?;
            write_tasks_jsonl(&mut w, &suite.probes)?;
            w.flush()?;
            write_json(
                &common.out_dir,
                "preferences.json",
                &build_preference_data(&cfg)?,
            )?;
            println!(
                "wrote {} tasks and {} probes to {}",
                suite.train.len(),
                suite.probes.len(),
                common.out_dir.display()
            );
        }
        Command::Screen(common) => {
            let cfg = load_config(&common)?;
            let suite = build_suite(&cfg)?;
            let model = build_model(&cfg);
            let params = init_params(&cfg, &model)?;
            let (records, leaked) = screen_suite(&cfg, &suite, &model, &params)?;
            let mut w = create(&common.out_dir, "curation.jsonl")?;
            write_curation_jsonl(&mut w, &records).map_err(HarnessError::from)?;
            w.flush()?;
            println!("screened {} tasks, {} leaked", records.len(), leaked.len());
        }
        Command::TrainStage1 {
            common,
            init,
            apply_prior: with_prior,
            timing,
        } => {
            let cfg = load_config(&common)?;
            let mut params = load_params(&cfg, init.as_deref())?;
            if with_prior {
                apply_prior(&build_model(&cfg), &mut params, &cfg.model.prior)?;
            }
            let out = run_stage1_from(&cfg, &opts(&common, timing), params)?;
            let mut w = create(&common.out_dir, "metrics_stage1.jsonl")?;
            write_metrics_jsonl(&mut w, &out.metrics)?;
            w.flush()?;
            let mut w = create(&common.out_dir, "curation.jsonl")?;
            write_curation_jsonl(&mut w, &out.curation).map_err(HarnessError::from)?;
            w.flush()?;
            save_checkpoint(&out.params, &common.out_dir.join("stage1.ckpt"))?;
            println!(
                "stage1: {} iterations, greedy accuracy {:.3} -> {:.3}, {} leaked tasks excluded",
                out.metrics.len(),
                out.initial_accuracy,
                out.final_accuracy,
                out.leaked.len()
            );
        }
        Command::TrainStage2 {
            common,
            checkpoint,
            pairs,
            timing,
        } => {
            let cfg = load_config(&common)?;
            let params = load_params(&cfg, checkpoint.as_deref())?;
            let data: PreferenceData = match pairs {
                Some(p) => serde_json::from_reader(BufReader::new(File::open(&p)?))
                    .map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?,
                None => build_preference_data(&cfg)?,
            };
            let out = run_stage2(&cfg, &opts(&common, timing), params, &data)?;
            let mut w = create(&common.out_dir, "metrics_stage2.jsonl")?;
            write_metrics_jsonl(&mut w, &out.metrics)?;
            w.flush()?;
            save_checkpoint(&out.params, &common.out_dir.join("stage2.ckpt"))?;
            let last = out.metrics.last();
            println!(
                "stage2: {} epochs, preference accuracy {:.3} -> {:.3} (held-out {})",
                out.metrics.len(),
                out.initial_preference_accuracy,
                last.and_then(|r| r.preference_accuracy)
                    .unwrap_or(out.initial_preference_accuracy),
                last.and_then(|r| r.heldout_preference_accuracy)
                    .map_or_else(|| "n/a".to_string(), |a| format!("{a:.3}")),
            );
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let params = load_checkpoint(&checkpoint)?;
            let suite = build_suite(&cfg)?;
            let mut tasks: Vec<Task> = suite.train.clone();
            for t in &suite.context {
                let ablated = ablate_context(t)?;
                if !tasks.iter().any(|x| x.id == ablated.id) {
                    tasks.push(ablated);
                }
            }
            let report = evaluate(&cfg, &params, &tasks, &suite.probes, &opts(&common, false))?;
            write_json(&common.out_dir, "eval.json", &report)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).map_err(|e| HarnessError::Io(e.into()))?
            );
        }
        Command::Report { metrics, output } => {
            let records = read_metrics_jsonl(BufReader::new(File::open(&metrics)?))?;
            match output {
                Some(path) => {
                    let mut w = BufWriter::new(File::create(path)?);
                    metrics_to_csv(&mut w, &records)?;
                    w.flush()?;
                }
                None => metrics_to_csv(std::io::stdout().lock(), &records)?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
