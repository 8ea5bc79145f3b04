//! Branch model predictive control for longitudinal driving among humans
//! whose intent is multi-modal.
//!
//! The planner optimizes over a scenario tree: one shared trajectory up to a
//! branching time, then one continuation per plausible human policy, with an
//! observation delay during which the continuations must still agree. The
//! human's reaction to the plan is part of the rollout, and in
//! gap-acceptance scenes the branch probabilities themselves depend on the
//! plan, closed through a fixed point.
//!
//! Entry points:
//! - [`config::ScenarioConfig`] describes a scene; bundled examples live in
//!   [`config::bundled`].
//! - [`planner::PlanningProblem`] solves single plans; [`baselines`] holds
//!   the robust, prescient, and contingency reference planners.
//! - [`sim`] closes the loop and runs probability sweeps.
//! - [`output`] writes the CSV/JSON artifacts the CLI emits.

pub mod baselines;
pub mod config;
pub mod decision;
pub mod dynamics;
pub mod output;
pub mod planner;
pub mod policies;
pub mod sim;
pub mod tree;

pub use config::{load_config, ScenarioConfig, ScenarioKind};
pub use dynamics::{ControlInput, TimeGrid, VehicleState};
pub use planner::{BranchPlan, PlanningProblem};
pub use sim::{run_closed_loop, run_sweep, PlannerKind, TrialResult};
pub use tree::{build_tree, ScenarioTree};
