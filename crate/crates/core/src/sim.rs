//! Closed-loop experiment harness.
//!
//! Each trial draws a ground-truth branch, then replans every step with the
//! chosen planner while the true human unfolds underneath. The planner only
//! learns the truth `dt_obs` after the commitment point; in the traffic-light
//! layout the virtual vehicle's measurement is additionally frozen at its
//! parked state until then, since the light is simply not visible earlier.
//! Sweeps vary the branch probability over a grid with common random numbers
//! across planners and cells.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{contingency_plan, robust_plan};
use crate::config::{ConfigError, ScenarioConfig, ScenarioKind};
use crate::decision::{crossing_probability, time_to_arrival, DecisionMode};
use crate::dynamics::{step, DynamicsError, VehicleState};
use crate::planner::{
    collision_margin, extract_control, stage_cost, BranchPlan, PlanError, PlanningProblem,
    WarmStart,
};
use crate::policies::hv_input;
use crate::tree::{build_tree, ScenarioTree, TreeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerKind {
    Branch,
    Robust,
    Prescient,
    Contingency,
}

impl PlannerKind {
    pub const ALL: [PlannerKind; 4] = [
        PlannerKind::Branch,
        PlannerKind::Robust,
        PlannerKind::Prescient,
        PlannerKind::Contingency,
    ];
}

impl std::fmt::Display for PlannerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            PlannerKind::Branch => "branch",
            PlannerKind::Robust => "robust",
            PlannerKind::Prescient => "prescient",
            PlannerKind::Contingency => "contingency",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for PlannerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "branch" => Ok(PlannerKind::Branch),
            "robust" => Ok(PlannerKind::Robust),
            "prescient" => Ok(PlannerKind::Prescient),
            "contingency" => Ok(PlannerKind::Contingency),
            other => Err(format!(
                "unknown planner '{other}' (expected branch|robust|prescient|contingency)"
            )),
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("sweep needs exactly two post-branching policies, config has {children}")]
    SweepArity { children: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// The triggering agent passed the branching position.
    BranchCommitted,
    /// The observation delay elapsed; planners see the true branch.
    TruthDetected,
    /// The AV entered the conflict region.
    ConflictEntered,
    /// The solver fell back to the braking profile this cycle.
    FallbackEngaged,
    /// The shared observation window started shrinking toward detection.
    ObservationTruncated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub step: usize,
    pub kind: EventKind,
    pub detail: String,
}

/// One control cycle of a trial, recorded at the cycle's start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub time: f64,
    pub av: VehicleState,
    pub hv: VehicleState,
    pub input: f64,
    pub stage_cost: f64,
    pub cumulative_cost: f64,
    pub detected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub planner: PlannerKind,
    pub trial: u64,
    pub truth_branch: usize,
    pub total_cost: f64,
    pub steps: Vec<StepLog>,
    pub events: Vec<Event>,
    /// Smallest exact collision margin over the realized trajectory.
    pub min_margin: f64,
    pub safety_violation: bool,
    pub fallback_cycles: usize,
    pub committed_at: Option<usize>,
    pub detected_at: Option<usize>,
    /// Child branch probabilities used by the first planning cycle.
    pub initial_probabilities: Vec<f64>,
}

/// One (probability, planner) aggregate of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub probability: f64,
    pub planner: PlannerKind,
    pub trials: u64,
    pub mean_cost: f64,
    pub std_cost: f64,
    pub collisions: u64,
    pub fallback_trials: u64,
}

/// Stable per-trial RNG stream: same trial index, same draws, independent of
/// planner and sweep cell (common random numbers).
fn trial_rng(master_seed: u64, trial: u64) -> ChaCha8Rng {
    let mut z = master_seed ^ trial.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

/// Ground truth for one trial. Fixed-probability scenarios resolve the
/// branch up front from one uniform draw; crossing-frequency scenarios keep
/// the draw and decide at the commitment point from the live scene.
enum Truth {
    Resolved(usize),
    Pending { uniform: f64 },
}

impl Truth {
    fn resolved(&self) -> Option<usize> {
        match self {
            Truth::Resolved(id) => Some(*id),
            Truth::Pending { .. } => None,
        }
    }
}

fn draw_fixed_truth(tree: &ScenarioTree, uniform: f64) -> usize {
    let mut acc = 0.0;
    for child in &tree.children {
        acc += child.probability;
        if uniform < acc {
            return child.id;
        }
    }
    tree.children.last().map(|c| c.id).expect("tree has children")
}

/// Run one closed-loop trial.
pub fn run_closed_loop(
    config: &ScenarioConfig,
    planner: PlannerKind,
    master_seed: u64,
    trial: u64,
) -> Result<TrialResult, SimError> {
    let grid = config.time_grid()?;
    let problem = PlanningProblem::from_config(config)?;
    let geometry = config.geometry();
    let env = config.policy_env();
    let dt = grid.dt;
    let dt_obs_steps = config.dt_obs_steps(&grid);
    let nominal_id = config.nominal_branch_id();
    let base_multi_start = problem.solver.multi_start;

    let mut rng = trial_rng(master_seed, trial);
    let uniform: f64 = rng.random();
    // The reference tree fixes the child set and the configured belief.
    let reference_tree = build_tree(config, &grid, config.hv_init, config.av_init)?;
    let mut truth = match &config.decision.mode {
        DecisionMode::FixedProbabilities { .. } => {
            Truth::Resolved(draw_fixed_truth(&reference_tree, uniform))
        }
        DecisionMode::CrossingFrequency => Truth::Pending { uniform },
    };

    let mut problem = problem;
    let mut av = config.av_init;
    let mut hv_true = config.hv_init;
    let mut u_prev = 0.0;
    let mut prev_plan: Option<BranchPlan> = None;
    let mut committed_at: Option<usize> = None;
    let mut detected_at: Option<usize> = None;
    let mut total_cost = 0.0;
    let mut min_margin = f64::INFINITY;
    let mut safety_violation = false;
    let mut fallback_cycles = 0;
    let mut steps = Vec::new();
    let mut events = Vec::new();
    let mut initial_probabilities = Vec::new();
    let mut conflict_entered = false;
    let mut window_truncated = false;

    let finish_line = config.s_conflict + config.conflict_len;

    for step_idx in 0..config.max_steps {
        // Commitment: the triggering agent passes the branching position.
        let trigger_pos = match config.kind {
            ScenarioKind::TrafficLight => av.pos,
            _ => hv_true.pos,
        };
        if committed_at.is_none() && trigger_pos >= config.s_branch {
            committed_at = Some(step_idx);
            if let Truth::Pending { uniform } = truth {
                // Gap acceptance on the live scene: the human reads the AV's
                // time-to-arrival at the conflict point as it is now.
                let tta = time_to_arrival(&[av], config.s_conflict, 0, dt);
                let p_cross = crossing_probability(tta, &config.decision);
                let cross_id = reference_tree
                    .children
                    .iter()
                    .find(|c| c.policy.is_cross_like())
                    .map(|c| c.id)
                    .expect("crossing_frequency configs have a cross child");
                let stop_id = reference_tree
                    .children
                    .iter()
                    .find(|c| c.policy.is_stop_like())
                    .map(|c| c.id)
                    .expect("crossing_frequency configs have a stop child");
                let chosen = if uniform < p_cross { cross_id } else { stop_id };
                truth = Truth::Resolved(chosen);
                events.push(Event {
                    step: step_idx,
                    kind: EventKind::BranchCommitted,
                    detail: format!(
                        "branch {chosen} drawn at p_cross {:.3} (tta {:.2} s)",
                        p_cross, tta
                    ),
                });
            } else {
                events.push(Event {
                    step: step_idx,
                    kind: EventKind::BranchCommitted,
                    detail: format!("branch {}", truth.resolved().unwrap_or(0)),
                });
            }
        }
        let detected = committed_at.map_or(false, |k| step_idx >= k + dt_obs_steps);
        if detected && detected_at.is_none() {
            detected_at = Some(step_idx);
            events.push(Event {
                step: step_idx,
                kind: EventKind::TruthDetected,
                detail: format!("branch {}", truth.resolved().unwrap_or(0)),
            });
        }

        // Measurement: the traffic-light phantom stays at its parked state
        // until the light is visible.
        let hv_measured = if config.kind == ScenarioKind::TrafficLight && !detected {
            config.hv_init
        } else {
            hv_true
        };

        let mut tree = build_tree(config, &grid, hv_measured, av)?;
        if let Some(k) = committed_at {
            if !detected {
                let remaining = k + dt_obs_steps - step_idx;
                if remaining < dt_obs_steps && !window_truncated {
                    window_truncated = true;
                    events.push(Event {
                        step: step_idx,
                        kind: EventKind::ObservationTruncated,
                        detail: format!("{remaining} shared steps left"),
                    });
                }
                tree = tree.with_observation_window(remaining);
            }
        }
        if detected {
            let branch = truth.resolved().expect("detection implies resolved truth");
            tree = tree.pruned_to(branch)?;
        }

        // Warm starts carry across cycles; fresh candidate seeds are worth
        // their cost only when there is no history, when the last cycle fell
        // back, or when the tree just collapsed under the warm start.
        problem.solver.multi_start = base_multi_start
            && (step_idx == 0
                || detected_at == Some(step_idx)
                || prev_plan.as_ref().is_some_and(|p| p.diagnostics.fallback));
        let warm = prev_plan.as_ref().map(|plan| WarmStart { plan, shift: 1 });
        let plan = match planner {
            _ if detected => problem.plan_branch(&tree, hv_measured, av, u_prev, warm)?,
            PlannerKind::Branch => problem.plan_branch(&tree, hv_measured, av, u_prev, warm)?,
            PlannerKind::Robust => robust_plan(&problem, &tree, hv_measured, av, u_prev, warm),
            PlannerKind::Prescient => {
                // The oracle knows the outcome before it is observable; in
                // crossing-frequency mode the decision does not exist yet,
                // so until commitment the oracle plans like the branch MPC.
                match truth.resolved() {
                    Some(branch) => {
                        let pruned = tree.pruned_to(branch)?;
                        problem.plan_branch(&pruned, hv_measured, av, u_prev, warm)?
                    }
                    None => problem.plan_branch(&tree, hv_measured, av, u_prev, warm)?,
                }
            }
            PlannerKind::Contingency => {
                contingency_plan(&problem, &tree, nominal_id, hv_measured, av, u_prev, warm)?
            }
        };
        if step_idx == 0 {
            initial_probabilities = plan.children.iter().map(|c| c.probability).collect();
        }
        if plan.diagnostics.fallback {
            fallback_cycles += 1;
            events.push(Event {
                step: step_idx,
                kind: EventKind::FallbackEngaged,
                detail: format!("residual {:.3e}", plan.diagnostics.max_violation),
            });
        }

        let input = extract_control(&plan, &tree, 0).map_err(SimError::Plan)?;

        // Advance the true world one step.
        let av_next = step(av, input, dt)?;
        let truth_policy = truth
            .resolved()
            .and_then(|id| reference_tree.child(id))
            .map(|c| &c.policy)
            .unwrap_or(&config.hv_policy_before);
        let hv_accel = hv_input(
            hv_true,
            av,
            config.s_branch,
            &config.hv_policy_before,
            truth_policy,
            &env,
        );
        let hv_next = step(hv_true, hv_accel, dt)?;

        let stage = stage_cost(&config.weights, input.accel, u_prev, av, av_next);
        total_cost += stage;
        let margin =
            collision_margin(&[av_next], &[hv_next], &geometry, config.constraints.d_safe)[0];
        if margin < min_margin {
            min_margin = margin;
        }
        if margin < -1e-9 {
            safety_violation = true;
        }
        if !conflict_entered && av_next.pos >= config.s_conflict {
            conflict_entered = true;
            events.push(Event {
                step: step_idx,
                kind: EventKind::ConflictEntered,
                detail: format!("av at {:.2} m", av_next.pos),
            });
        }

        steps.push(StepLog {
            step: step_idx,
            time: grid.time_at(step_idx),
            av,
            hv: hv_true,
            input: input.accel,
            stage_cost: stage,
            cumulative_cost: total_cost,
            detected,
        });

        av = av_next;
        hv_true = hv_next;
        u_prev = input.accel;
        prev_plan = Some(plan);

        if av.pos > finish_line && hv_true.pos > finish_line {
            break;
        }
    }

    Ok(TrialResult {
        planner,
        trial,
        truth_branch: truth.resolved().unwrap_or(0),
        total_cost,
        steps,
        events,
        min_margin,
        safety_violation,
        fallback_cycles,
        committed_at,
        detected_at,
        initial_probabilities,
    })
}

/// Closed-loop sweep over branch probabilities.
///
/// Each grid value `p` replaces the configured decision model with fixed
/// probabilities `[1 - p, p]` (`p` weights the second child), used both as
/// the planner's belief and as the ground-truth distribution. Trials are
/// independent and share random draws across planners and cells.
pub fn run_sweep(
    config: &ScenarioConfig,
    planners: &[PlannerKind],
    grid_probabilities: &[f64],
    trials: u64,
    master_seed: u64,
) -> Result<Vec<SweepCell>, SimError> {
    if config.hv_policies_after.len() != 2 {
        return Err(SimError::SweepArity { children: config.hv_policies_after.len() });
    }
    let mut cells = Vec::with_capacity(grid_probabilities.len() * planners.len());
    for &p in grid_probabilities {
        let mut cell_config = config.clone();
        cell_config.decision.mode =
            DecisionMode::FixedProbabilities { probabilities: vec![1.0 - p, p] };
        cell_config.validate()?;
        for &planner in planners {
            let results: Result<Vec<TrialResult>, SimError> = (0..trials)
                .into_par_iter()
                .map(|trial| run_closed_loop(&cell_config, planner, master_seed, trial))
                .collect();
            let results = results?;
            let mean = results.iter().map(|r| r.total_cost).sum::<f64>() / trials.max(1) as f64;
            let variance = if trials > 1 {
                results.iter().map(|r| (r.total_cost - mean).powi(2)).sum::<f64>()
                    / (trials - 1) as f64
            } else {
                0.0
            };
            cells.push(SweepCell {
                probability: p,
                planner,
                trials,
                mean_cost: mean,
                std_cost: variance.sqrt(),
                collisions: results.iter().filter(|r| r.safety_violation).count() as u64,
                fallback_trials: results.iter().filter(|r| r.fallback_cycles > 0).count() as u64,
            });
        }
    }
    Ok(cells)
}
