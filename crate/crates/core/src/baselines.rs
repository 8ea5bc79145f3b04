//! Reference planners the branch planner is measured against.
//!
//! All three reuse the same transcription and solver; they differ only in
//! input sharing, branch-cost aggregation, and which branches keep their
//! constraints:
//!
//! * Robust: one input sequence for every branch, worst-case (smoothed max)
//!   cost, every branch constrained.
//! * Prescient: an oracle that knows the true branch; plans on the tree
//!   pruned to it.
//! * Contingency: optimizes the nominal branch's cost alone while keeping
//!   every branch feasible; branch probabilities do not enter at all.

use crate::dynamics::VehicleState;
use crate::planner::{
    solve, BranchPlan, ObjectiveMode, PlanError, PlanningProblem, SharingMode,
    TranscriptionOptions, WarmStart,
};
use crate::tree::{ScenarioTree, TreeError};

/// Worst-case plan over all branches with a single input sequence.
pub fn robust_plan(
    problem: &PlanningProblem,
    tree: &ScenarioTree,
    x_init_hv: VehicleState,
    x_init_av: VehicleState,
    u_prev: f64,
    warm: Option<WarmStart>,
) -> BranchPlan {
    let options = TranscriptionOptions {
        sharing: SharingMode::FullHorizon,
        objective: ObjectiveMode::WorstCase {
            temperature: problem.solver.worst_case_temperature,
        },
        cost_weights_override: None,
        enforce_all: true,
    };
    let tr = problem.transcription(tree, options, x_init_hv, x_init_av, u_prev);
    let warm_vars = warm.map(|w| tr.warm_start_from(w.plan, w.shift));
    solve(&tr, warm_vars, &problem.solver)
}

/// Oracle plan on the tree pruned to the true branch.
pub fn prescient_plan(
    problem: &PlanningProblem,
    tree: &ScenarioTree,
    true_branch: usize,
    x_init_hv: VehicleState,
    x_init_av: VehicleState,
    u_prev: f64,
    warm: Option<WarmStart>,
) -> Result<BranchPlan, PlanError> {
    let pruned = tree.pruned_to(true_branch)?;
    problem.plan_branch(&pruned, x_init_hv, x_init_av, u_prev, warm)
}

/// Nominal-branch cost with every branch kept feasible.
pub fn contingency_plan(
    problem: &PlanningProblem,
    tree: &ScenarioTree,
    nominal_branch: usize,
    x_init_hv: VehicleState,
    x_init_av: VehicleState,
    u_prev: f64,
    warm: Option<WarmStart>,
) -> Result<BranchPlan, PlanError> {
    let nominal = tree
        .children
        .iter()
        .position(|c| c.id == nominal_branch)
        .ok_or(TreeError::UnknownBranch(nominal_branch))?;
    let mut weights = vec![0.0; tree.children.len()];
    weights[nominal] = 1.0;
    let options = TranscriptionOptions {
        sharing: SharingMode::ObservationPrefix,
        objective: ObjectiveMode::Expected,
        cost_weights_override: Some(weights),
        enforce_all: true,
    };
    let tr = problem.transcription(tree, options, x_init_hv, x_init_av, u_prev);
    let warm_vars = warm.map(|w| tr.warm_start_from(w.plan, w.shift));
    Ok(solve(&tr, warm_vars, &problem.solver))
}
