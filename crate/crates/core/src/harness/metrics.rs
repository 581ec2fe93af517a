use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::reward_engine::Phase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
}

/// One line of the metrics stream. Fields that a stage does not produce, or
/// that are only computed every few iterations, are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub stage: Stage,
    pub iteration: usize,
    pub phase: Option<Phase>,
    pub policy_version: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub greedy_accuracy: Option<f64>,
    pub mean_length: Option<f64>,
    pub p95_length: Option<f64>,
    pub informative_fraction: Option<f64>,
    pub rho: Option<f64>,
    pub groups_sampled: Option<usize>,
    pub batch_groups: Option<usize>,
    pub batch_filled: Option<bool>,
    pub mean_abs_advantage: Option<f64>,
    pub clip_fraction: Option<f64>,
    pub distinct_count: Option<f64>,
    pub leaked_in_batch: Option<usize>,
    pub preference_accuracy: Option<f64>,
    pub heldout_preference_accuracy: Option<f64>,
    /// Only filled when timing is requested; it would break byte-identical reruns.
    pub wall_ms: Option<u64>,
}

impl MetricsRecord {
    pub fn new(stage: Stage, iteration: usize) -> Self {
        Self {
            stage,
            iteration,
            phase: None,
            policy_version: 0,
            loss: 0.0,
            grad_norm: 0.0,
            greedy_accuracy: None,
            mean_length: None,
            p95_length: None,
            informative_fraction: None,
            rho: None,
            groups_sampled: None,
            batch_groups: None,
            batch_filled: None,
            mean_abs_advantage: None,
            clip_fraction: None,
            distinct_count: None,
            leaked_in_batch: None,
            preference_accuracy: None,
            heldout_preference_accuracy: None,
            wall_ms: None,
        }
    }
}

pub fn write_metrics_jsonl<W: Write>(
    mut out: W,
    records: &[MetricsRecord],
) -> Result<(), HarnessError> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| HarnessError::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_metrics_jsonl<R: BufRead>(input: R) -> Result<Vec<MetricsRecord>, HarnessError> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line)
            .map_err(|e| HarnessError::Config(format!("metrics line {}: {e}", i + 1)))?;
        records.push(r);
    }
    Ok(records)
}

const CSV_COLUMNS: &[&str] = &[
    "stage",
    "iteration",
    "phase",
    "loss",
    "greedy_accuracy",
    "mean_length",
    "p95_length",
    "informative_fraction",
    "rho",
    "mean_abs_advantage",
    "distinct_count",
    "preference_accuracy",
    "heldout_preference_accuracy",
];

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Flattens metrics into a CSV table for plotting.
pub fn metrics_to_csv<W: Write>(out: W, records: &[MetricsRecord]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| HarnessError::Io(std::io::Error::other(e));
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for r in records {
        let stage = match r.stage {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        };
        let phase = match r.phase {
            Some(Phase::EarlyPassk) => "early_passk",
            Some(Phase::LateDiversity) => "late_diversity",
            None => "",
        };
        w.write_record([
            stage.to_string(),
            r.iteration.to_string(),
            phase.to_string(),
            r.loss.to_string(),
            opt(r.greedy_accuracy),
            opt(r.mean_length),
            opt(r.p95_length),
            opt(r.informative_fraction),
            opt(r.rho),
            opt(r.mean_abs_advantage),
            opt(r.distinct_count),
            opt(r.preference_accuracy),
            opt(r.heldout_preference_accuracy),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Nearest-rank percentile of `values` (`q` in `[0, 1]`); `None` when empty.
pub fn percentile(values: &[usize], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1] as f64)
}

pub fn mean(values: &[usize]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<usize>() as f64 / values.len() as f64)
}
