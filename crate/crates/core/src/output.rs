//! Artifact writers: CSV time series plus JSON metadata.
//!
//! Every emitted CSV has a header row and a fixed, documented column order.
//! `run_meta.json` records the config hash, seed, and invocation so an
//! output directory is self-describing and reproducible.

use std::fs::File;
use std::io;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::dynamics::TimeGrid;
use crate::planner::BranchPlan;
use crate::sim::{Event, PlannerKind, SweepCell, TrialResult};

/// Hex SHA-256 of the raw config file contents.
pub fn config_hash(config_text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(config_text.as_bytes());
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

/// Invocation record embedded next to every artifact set.
#[derive(Debug, Clone, Serialize)]
pub struct RunMeta {
    pub command: String,
    pub config_path: String,
    pub config_sha256: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub planner: Option<PlannerKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<f64>>,
    pub files: Vec<String>,
    pub version: String,
}

pub fn write_run_meta(dir: &Path, meta: &RunMeta) -> io::Result<()> {
    let file = File::create(dir.join("run_meta.json"))?;
    serde_json::to_writer_pretty(file, meta).map_err(io::Error::other)
}

/// Per-branch time series of one plan.
///
/// Columns: `branch_id, probability, step, time, av_pos, av_vel, av_accel,
/// hv_pos, hv_vel`. The root leg is `branch_id = 0`; child legs repeat the
/// branching state at their first row. The terminal state of each leg has no
/// input, so `av_accel` is empty there.
pub fn write_plan_csv(dir: &Path, plan: &BranchPlan, grid: &TimeGrid) -> io::Result<()> {
    let mut writer = csv::Writer::from_path(dir.join("plan.csv"))?;
    writer.write_record([
        "branch_id",
        "probability",
        "step",
        "time",
        "av_pos",
        "av_vel",
        "av_accel",
        "hv_pos",
        "hv_vel",
    ])?;
    let legs = std::iter::once((&plan.root, 0usize)).chain(plan.children.iter().map(|c| (c, plan.t_br)));
    for (leg, offset) in legs {
        for (i, av) in leg.av_states.iter().enumerate() {
            let step = offset + i;
            let accel =
                leg.inputs.get(i).map(|u| format!("{}", u.accel)).unwrap_or_default();
            let hv = leg.hv_states[i];
            writer.write_record([
                leg.branch_id.to_string(),
                format!("{}", leg.probability),
                step.to_string(),
                format!("{}", grid.time_at(step)),
                format!("{}", av.pos),
                format!("{}", av.vel),
                accel,
                format!("{}", hv.pos),
                format!("{}", hv.vel),
            ])?;
        }
    }
    writer.flush()
}

/// Closed-loop trace of one trial.
///
/// Columns: `step, time, av_pos, av_vel, hv_pos, hv_vel, input, stage_cost,
/// cumulative_cost, detected`.
pub fn write_trace_csv(dir: &Path, trial: &TrialResult) -> io::Result<()> {
    let mut writer = csv::Writer::from_path(dir.join("trace.csv"))?;
    writer.write_record([
        "step",
        "time",
        "av_pos",
        "av_vel",
        "hv_pos",
        "hv_vel",
        "input",
        "stage_cost",
        "cumulative_cost",
        "detected",
    ])?;
    for log in &trial.steps {
        writer.write_record([
            log.step.to_string(),
            format!("{}", log.time),
            format!("{}", log.av.pos),
            format!("{}", log.av.vel),
            format!("{}", log.hv.pos),
            format!("{}", log.hv.vel),
            format!("{}", log.input),
            format!("{}", log.stage_cost),
            format!("{}", log.cumulative_cost),
            log.detected.to_string(),
        ])?;
    }
    writer.flush()
}

/// Trial summary for `events.json`: everything except the dense trace.
#[derive(Debug, Clone, Serialize)]
pub struct TrialSummary<'a> {
    pub planner: PlannerKind,
    pub trial: u64,
    pub truth_branch: usize,
    pub total_cost: f64,
    pub min_margin: f64,
    pub safety_violation: bool,
    pub fallback_cycles: usize,
    pub committed_at: Option<usize>,
    pub detected_at: Option<usize>,
    pub initial_probabilities: &'a [f64],
    pub events: &'a [Event],
}

impl<'a> TrialSummary<'a> {
    pub fn of(trial: &'a TrialResult) -> Self {
        TrialSummary {
            planner: trial.planner,
            trial: trial.trial,
            truth_branch: trial.truth_branch,
            total_cost: trial.total_cost,
            min_margin: trial.min_margin,
            safety_violation: trial.safety_violation,
            fallback_cycles: trial.fallback_cycles,
            committed_at: trial.committed_at,
            detected_at: trial.detected_at,
            initial_probabilities: &trial.initial_probabilities,
            events: &trial.events,
        }
    }
}

pub fn write_events_json(dir: &Path, trial: &TrialResult) -> io::Result<()> {
    let file = File::create(dir.join("events.json"))?;
    serde_json::to_writer_pretty(file, &TrialSummary::of(trial)).map_err(io::Error::other)
}

/// Tidy sweep table, one row per (probability, planner) cell.
///
/// Columns: `probability, planner, mean_cost, std_cost, trials, collisions,
/// fallback_trials`.
pub fn write_sweep_csv(dir: &Path, cells: &[SweepCell]) -> io::Result<()> {
    let mut writer = csv::Writer::from_path(dir.join("sweep.csv"))?;
    writer.write_record([
        "probability",
        "planner",
        "mean_cost",
        "std_cost",
        "trials",
        "collisions",
        "fallback_trials",
    ])?;
    for cell in cells {
        writer.write_record([
            format!("{}", cell.probability),
            cell.planner.to_string(),
            format!("{}", cell.mean_cost),
            format!("{}", cell.std_cost),
            cell.trials.to_string(),
            cell.collisions.to_string(),
            cell.fallback_trials.to_string(),
        ])?;
    }
    writer.flush()
}
