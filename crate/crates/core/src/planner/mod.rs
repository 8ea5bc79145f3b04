//! Branch-MPC transcription and solve.
//!
//! The scenario tree becomes a single-shooting program over the AV input
//! tree: one input per root step, one shared input per observation-window
//! step (identical across children by construction, so the observation
//! constraint holds exactly), and one input per child per remaining step.
//! The human prediction is eliminated by rolling its feedback policy inside
//! the cost, gradients come from a hand-written reverse sweep through both
//! rollouts, and hard feasibility is restored by penalty continuation with
//! an exact post-check on the unsmoothed margins.

pub mod solver;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ScenarioConfig};
use crate::decision::{branch_probabilities, DecisionError, DecisionMode, DecisionModelParams};
use crate::dynamics::{step_expansion, ControlInput, StepExpansion, TimeGrid, VehicleState};
use crate::policies::{
    policy_accel_expansion, predicted_hv_braking, PolicyEnv, PolicyExpansion, PolicyKind,
};
use crate::tree::{ScenarioTree, TreeError};
use solver::{minimize_box, SpgOptions};

/// Stage-cost weights and the collision-penalty shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    /// Quadratic weight on AV speed deviation from `v_ref_av`.
    pub w_track: f64,
    /// Quadratic weight on AV acceleration.
    pub w_accel: f64,
    /// Quadratic weight on AV acceleration rate (comfort).
    pub w_accel_rate: f64,
    /// Linear reward per meter of AV progress.
    pub w_progress: f64,
    /// Initial collision-penalty weight; the continuation loop doubles it
    /// until the exact margins check out.
    pub w_collision: f64,
    /// Distance over which the smooth margin activation ramps in, before
    /// the exact region [m].
    pub collision_ramp: f64,
    /// Extra separation targeted by the smooth penalty so the exact margin
    /// retains slack at a finite penalty weight [m].
    pub collision_buffer: f64,
    /// AV reference speed [m/s].
    pub v_ref_av: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            w_track: 0.2,
            w_accel: 0.5,
            w_accel_rate: 0.5,
            w_progress: 0.1,
            w_collision: 200.0,
            collision_ramp: 4.0,
            collision_buffer: 0.5,
            v_ref_av: 10.0,
        }
    }
}

/// Input and state bounds plus the safety distances the planner enforces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConstraints {
    pub u_min: f64,
    pub u_max: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Required separation inside a shared lane [m].
    pub d_safe: f64,
    /// Courtesy cap on the braking a plan may implicitly demand of the
    /// human [m/s^2, positive].
    pub hv_brake_limit: f64,
}

impl Default for PlannerConstraints {
    fn default() -> Self {
        Self { u_min: -4.0, u_max: 3.0, v_min: 0.0, v_max: 25.0, d_safe: 10.0, hv_brake_limit: 4.0 }
    }
}

/// How the conflict between the two paths is shaped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictMode {
    /// Both agents share one lane from `s_conflict` on: keep a longitudinal
    /// gap of `d_safe` once both are past the merge point.
    Merging,
    /// The paths cross inside `[s_conflict, s_conflict + region_len]` on
    /// separate roads: simultaneous occupancy is the violation.
    Intersection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConflictGeometry {
    pub mode: ConflictMode,
    pub s_conflict: f64,
    pub region_len: f64,
}

/// Solver knobs; the defaults suit all bundled scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub nonmonotone_window: usize,
    /// Penalty-weight doublings allowed before falling back.
    pub max_continuations: usize,
    /// Try diverse initial guesses in addition to the warm start.
    pub multi_start: bool,
    /// Log-sum-exp temperature of the worst-case objective.
    pub worst_case_temperature: f64,
    pub fixed_point_rounds: usize,
    pub fixed_point_tolerance: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 400,
            tolerance: 1e-6,
            nonmonotone_window: 8,
            max_continuations: 8,
            multi_start: true,
            worst_case_temperature: 0.5,
            fixed_point_rounds: 5,
            fixed_point_tolerance: 1e-3,
        }
    }
}

impl SolverOptions {
    pub(crate) fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |field: &str, message: &str| ConfigError::Invalid {
            field: format!("solver.{field}"),
            message: message.to_string(),
        };
        if self.max_iterations == 0 {
            return Err(invalid("max_iterations", "must be positive"));
        }
        if !(self.tolerance > 0.0) {
            return Err(invalid("tolerance", "must be positive"));
        }
        if self.nonmonotone_window == 0 {
            return Err(invalid("nonmonotone_window", "must be positive"));
        }
        if !(self.worst_case_temperature > 0.0) {
            return Err(invalid("worst_case_temperature", "must be positive"));
        }
        if self.fixed_point_rounds == 0 {
            return Err(invalid("fixed_point_rounds", "must be positive"));
        }
        if !(self.fixed_point_tolerance > 0.0) {
            return Err(invalid("fixed_point_tolerance", "must be positive"));
        }
        Ok(())
    }

    fn spg(&self) -> SpgOptions {
        SpgOptions {
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            window: self.nonmonotone_window,
        }
    }
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("plan has no input to extract")]
    EmptyPlan,
    #[error(transparent)]
    Decision(#[from] DecisionError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// Exact per-step collision margins between two time-aligned legs;
/// `+inf` where the constraint is inactive, negative on violation.
pub fn collision_margin(
    av_leg: &[VehicleState],
    hv_leg: &[VehicleState],
    geometry: &ConflictGeometry,
    d_safe: f64,
) -> Vec<f64> {
    debug_assert_eq!(av_leg.len(), hv_leg.len(), "legs must be time-aligned");
    av_leg
        .iter()
        .zip(hv_leg)
        .map(|(av, hv)| match geometry.mode {
            ConflictMode::Merging => {
                if av.pos >= geometry.s_conflict && hv.pos >= geometry.s_conflict {
                    (av.pos - hv.pos).abs() - d_safe
                } else {
                    f64::INFINITY
                }
            }
            ConflictMode::Intersection => {
                let hi = geometry.s_conflict + geometry.region_len;
                let av_in = av.pos >= geometry.s_conflict && av.pos <= hi;
                let hv_in = hv.pos >= geometry.s_conflict && hv.pos <= hi;
                if av_in && hv_in {
                    -d_safe
                } else {
                    f64::INFINITY
                }
            }
        })
        .collect()
}

/// C^1 ramp from 0 to 1 on [0, 1]; returns value and derivative.
fn smoothstep(x: f64) -> (f64, f64) {
    if x <= 0.0 {
        (0.0, 0.0)
    } else if x >= 1.0 {
        (1.0, 0.0)
    } else {
        (x * x * (3.0 - 2.0 * x), 6.0 * x * (1.0 - x))
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct ViolationExpansion {
    viol: f64,
    d_av_pos: f64,
    d_hv_pos: f64,
}

/// Smooth stand-in for the exact margin used inside the objective. The
/// activation ramps in over `ramp` meters before the exact region and the
/// targeted separation is `d_safe + buffer`, so a finite penalty weight
/// leaves the exact margins strictly satisfied.
fn margin_violation(
    av: VehicleState,
    hv: VehicleState,
    geometry: &ConflictGeometry,
    d_safe: f64,
    ramp: f64,
    buffer: f64,
) -> ViolationExpansion {
    match geometry.mode {
        ConflictMode::Merging => {
            let (act_av, dact_av) = smoothstep((av.pos - (geometry.s_conflict - ramp)) / ramp);
            if act_av == 0.0 {
                return ViolationExpansion::default();
            }
            let (act_hv, dact_hv) = smoothstep((hv.pos - (geometry.s_conflict - ramp)) / ramp);
            if act_hv == 0.0 {
                return ViolationExpansion::default();
            }
            let gap = av.pos - hv.pos;
            let shortfall = (d_safe + buffer) - gap.abs();
            if shortfall <= 0.0 {
                return ViolationExpansion::default();
            }
            let sign = if gap >= 0.0 { 1.0 } else { -1.0 };
            ViolationExpansion {
                viol: shortfall * act_av * act_hv,
                d_av_pos: -sign * act_av * act_hv + shortfall * (dact_av / ramp) * act_hv,
                d_hv_pos: sign * act_av * act_hv + shortfall * act_av * (dact_hv / ramp),
            }
        }
        ConflictMode::Intersection => {
            let lo = geometry.s_conflict;
            let hi = geometry.s_conflict + geometry.region_len;
            let inside = |p: f64| {
                let (enter, denter) = smoothstep((p - (lo - ramp)) / ramp);
                let (exit, dexit) = smoothstep(((hi + ramp) - p) / ramp);
                (enter * exit, (denter / ramp) * exit - enter * (dexit / ramp))
            };
            let (in_av, din_av) = inside(av.pos);
            if in_av == 0.0 {
                return ViolationExpansion::default();
            }
            let (in_hv, din_hv) = inside(hv.pos);
            if in_hv == 0.0 {
                return ViolationExpansion::default();
            }
            let scale = d_safe + buffer;
            ViolationExpansion {
                viol: scale * in_av * in_hv,
                d_av_pos: scale * din_av * in_hv,
                d_hv_pos: scale * in_av * din_hv,
            }
        }
    }
}

/// One realized stage of the running cost; the same expression scores both
/// planned branches (probability-weighted) and closed-loop trajectories.
pub fn stage_cost(weights: &CostWeights, u: f64, u_prev: f64, from: VehicleState, to: VehicleState) -> f64 {
    let dv = to.vel - weights.v_ref_av;
    weights.w_track * dv * dv + weights.w_accel * u * u
        + weights.w_accel_rate * (u - u_prev) * (u - u_prev)
        - weights.w_progress * (to.pos - from.pos)
}

/// Which inputs the children share.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SharingMode {
    /// Inputs shared over the observation window only (Branch/Contingency).
    ObservationPrefix,
    /// One input sequence for every branch (Robust).
    FullHorizon,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObjectiveMode {
    /// Probability-weighted sum of branch costs.
    Expected,
    /// Smooth maximum (log-sum-exp) over branch costs.
    WorstCase { temperature: f64 },
}

#[derive(Debug, Clone)]
pub struct TranscriptionOptions {
    pub sharing: SharingMode,
    pub objective: ObjectiveMode,
    /// Per-child cost weights replacing the branch probabilities
    /// (Contingency puts all weight on its nominal branch).
    pub cost_weights_override: Option<Vec<f64>>,
    /// Keep constraints on every branch regardless of probability.
    pub enforce_all: bool,
}

impl Default for TranscriptionOptions {
    fn default() -> Self {
        Self {
            sharing: SharingMode::ObservationPrefix,
            objective: ObjectiveMode::Expected,
            cost_weights_override: None,
            enforce_all: false,
        }
    }
}

#[derive(Debug, Clone)]
struct BranchSlot {
    id: usize,
    policy: PolicyKind,
    probability: f64,
    cost_weight: f64,
    enforce: bool,
}

/// The planning program for one tree and scene.
#[derive(Debug, Clone)]
pub struct Transcription {
    grid: TimeGrid,
    pub t_br: usize,
    /// Shared input steps after branching.
    pub obs_steps: usize,
    root_policy: PolicyKind,
    root_weight: f64,
    slots: Vec<BranchSlot>,
    geometry: ConflictGeometry,
    weights: CostWeights,
    limits: PlannerConstraints,
    env: PolicyEnv,
    x_init_av: VehicleState,
    x_init_hv: VehicleState,
    u_prev: f64,
    objective: ObjectiveMode,
    n_child: usize,
}

/// Build the program. Input layout: `t_br` root inputs, `obs_steps` shared
/// inputs, then one block of `horizon - t_br - obs_steps` inputs per child.
#[allow(clippy::too_many_arguments)]
pub fn transcribe(
    tree: &ScenarioTree,
    geometry: ConflictGeometry,
    weights: CostWeights,
    limits: PlannerConstraints,
    env: PolicyEnv,
    grid: TimeGrid,
    x_init_hv: VehicleState,
    x_init_av: VehicleState,
    u_prev: f64,
    options: TranscriptionOptions,
) -> Transcription {
    let n = grid.horizon_steps;
    let t_br = tree.t_br.min(n);
    let obs_steps = match options.sharing {
        SharingMode::FullHorizon => n - t_br,
        SharingMode::ObservationPrefix => tree.dt_obs_steps.min(n - t_br),
    };
    let slots = tree
        .children
        .iter()
        .enumerate()
        .map(|(i, child)| {
            let cost_weight = options
                .cost_weights_override
                .as_ref()
                .map_or(child.probability, |w| w[i]);
            BranchSlot {
                id: child.id,
                policy: child.policy.clone(),
                probability: child.probability,
                cost_weight,
                enforce: options.enforce_all || child.probability > 0.0,
            }
        })
        .collect();
    Transcription {
        grid,
        t_br,
        obs_steps,
        root_policy: tree.root.policy.clone(),
        root_weight: tree.root.probability,
        slots,
        geometry,
        weights,
        limits,
        env,
        x_init_av,
        x_init_hv,
        u_prev,
        objective: options.objective,
        n_child: n - t_br - obs_steps,
    }
}

/// Forward record of one branch leg: states, inputs, and the per-step
/// linearizations the reverse sweep consumes.
struct LegRecord {
    av: Vec<VehicleState>,
    hv: Vec<VehicleState>,
    inputs: Vec<f64>,
    av_exp: Vec<StepExpansion>,
    hv_exp: Vec<StepExpansion>,
    hv_pol: Vec<PolicyExpansion>,
    /// Input preceding the leg (for the first rate term).
    u_before: f64,
    stage: f64,
    penalty: f64,
}

struct ForwardHuman<'a> {
    policy: &'a PolicyKind,
}

struct ForwardPass {
    root: LegRecord,
    children: Vec<LegRecord>,
}

#[derive(Debug, Clone, Copy)]
pub struct FeasibilityReport {
    /// Largest exact margin violation [m], 0 when none.
    pub max_margin_violation: f64,
    /// Largest implied HV braking beyond the courtesy limit [m/s^2].
    pub max_excess_braking: f64,
}

impl FeasibilityReport {
    pub fn feasible(&self) -> bool {
        self.max_margin_violation <= 1e-9 && self.max_excess_braking <= 1e-9
    }

    pub fn worst(&self) -> f64 {
        self.max_margin_violation.max(self.max_excess_braking)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    /// Final objective value (with penalties at the final weight).
    pub cost: f64,
    pub iterations: usize,
    pub continuations: usize,
    pub penalty_weight: f64,
    /// Exact post-check residual (margins and courtesy braking).
    pub max_violation: f64,
    pub feasible: bool,
    pub fallback: bool,
    pub fixed_point_rounds: usize,
    pub fixed_point_converged: bool,
}

impl Default for SolveDiagnostics {
    fn default() -> Self {
        Self {
            cost: f64::NAN,
            iterations: 0,
            continuations: 0,
            penalty_weight: 0.0,
            max_violation: 0.0,
            feasible: false,
            fallback: false,
            fixed_point_rounds: 0,
            fixed_point_converged: true,
        }
    }
}

/// One branch of a solved plan. Child legs start at the branching state, so
/// their state vectors overlap the root's last entry.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanLeg {
    pub branch_id: usize,
    pub probability: f64,
    pub inputs: Vec<ControlInput>,
    pub av_states: Vec<VehicleState>,
    pub hv_states: Vec<VehicleState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchPlan {
    pub root: PlanLeg,
    pub children: Vec<PlanLeg>,
    pub t_br: usize,
    pub obs_steps: usize,
    pub diagnostics: SolveDiagnostics,
}

impl BranchPlan {
    /// Highest-probability child; ties resolve to the lowest id.
    pub fn active_child(&self) -> Option<&PlanLeg> {
        let mut best: Option<&PlanLeg> = None;
        for leg in &self.children {
            if best.map_or(true, |b| leg.probability > b.probability) {
                best = Some(leg);
            }
        }
        best
    }

    /// AV states over the decided prefix: root leg plus the shared
    /// observation window (identical across children by construction).
    pub fn shared_av_prefix(&self) -> Vec<VehicleState> {
        let mut prefix = self.root.av_states.clone();
        if let Some(child) = self.children.first() {
            let take = self.obs_steps.min(child.av_states.len().saturating_sub(1));
            prefix.extend_from_slice(&child.av_states[1..=take]);
        }
        prefix
    }

    pub fn shared_hv_prefix(&self) -> Vec<VehicleState> {
        let mut prefix = self.root.hv_states.clone();
        if let Some(child) = self.children.first() {
            let take = self.obs_steps.min(child.hv_states.len().saturating_sub(1));
            prefix.extend_from_slice(&child.hv_states[1..=take]);
        }
        prefix
    }
}

impl Transcription {
    pub fn num_vars(&self) -> usize {
        self.t_br + self.obs_steps + self.slots.len() * self.n_child
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.limits.u_min, self.limits.u_max)
    }

    pub fn horizon(&self) -> usize {
        self.grid.horizon_steps
    }

    /// Variable index for the input applied at path step `t` on child
    /// `slot`. Root and shared steps alias across children.
    fn input_index(&self, slot: usize, t: usize) -> usize {
        let shared_end = self.t_br + self.obs_steps;
        if t < shared_end {
            t
        } else {
            shared_end + slot * self.n_child + (t - shared_end)
        }
    }

    /// Objective value at the configured base penalty weight, with its
    /// gradient.
    pub fn evaluate_cost(&self, vars: &[f64]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; vars.len()];
        let value = self.evaluate(vars, self.weights.w_collision, Some(&mut grad));
        (value, grad)
    }

    fn forward_leg(
        &self,
        human: ForwardHuman,
        x_av: VehicleState,
        x_hv: VehicleState,
        len: usize,
        input_at: impl Fn(usize) -> f64,
        u_before: f64,
        penalty_active: bool,
    ) -> LegRecord {
        let mut rec = LegRecord {
            av: Vec::with_capacity(len + 1),
            hv: Vec::with_capacity(len + 1),
            inputs: Vec::with_capacity(len),
            av_exp: Vec::with_capacity(len),
            hv_exp: Vec::with_capacity(len),
            hv_pol: Vec::with_capacity(len),
            u_before,
            stage: 0.0,
            penalty: 0.0,
        };
        rec.av.push(x_av);
        rec.hv.push(x_hv);
        let dt = self.grid.dt;
        let mut prev_u = u_before;
        for i in 0..len {
            let u = input_at(i);
            let av = rec.av[i];
            let hv = rec.hv[i];
            let pol = policy_accel_expansion(human.policy, hv, av, &self.env);
            let av_exp = step_expansion(av, u, dt);
            let hv_exp = step_expansion(hv, pol.accel, dt);
            rec.stage += stage_cost(&self.weights, u, prev_u, av, av_exp.next);
            if penalty_active {
                let ve = margin_violation(
                    av_exp.next,
                    hv_exp.next,
                    &self.geometry,
                    self.limits.d_safe,
                    self.weights.collision_ramp,
                    self.weights.collision_buffer,
                );
                rec.penalty += ve.viol * ve.viol;
                let over = av_exp.next.vel - self.limits.v_max;
                if over > 0.0 {
                    rec.penalty += over * over;
                }
                let under = self.limits.v_min - av_exp.next.vel;
                if under > 0.0 {
                    rec.penalty += under * under;
                }
            }
            rec.av.push(av_exp.next);
            rec.hv.push(hv_exp.next);
            rec.inputs.push(u);
            rec.av_exp.push(av_exp);
            rec.hv_exp.push(hv_exp);
            rec.hv_pol.push(pol);
            prev_u = u;
        }
        rec
    }

    fn forward(&self, vars: &[f64]) -> ForwardPass {
        let root = self.forward_leg(
            ForwardHuman { policy: &self.root_policy },
            self.x_init_av,
            self.x_init_hv,
            self.t_br,
            |i| vars[i],
            self.u_prev,
            true,
        );
        let x_av = *root.av.last().unwrap();
        let x_hv = *root.hv.last().unwrap();
        let child_len = self.grid.horizon_steps - self.t_br;
        let u_before = if self.t_br > 0 { vars[self.t_br - 1] } else { self.u_prev };
        let children = self
            .slots
            .iter()
            .enumerate()
            .map(|(slot, spec)| {
                self.forward_leg(
                    ForwardHuman { policy: &spec.policy },
                    x_av,
                    x_hv,
                    child_len,
                    |i| vars[self.input_index(slot, self.t_br + i)],
                    u_before,
                    spec.enforce,
                )
            })
            .collect();
        ForwardPass { root, children }
    }

    /// Softmax weights of the worst-case objective and its smoothed value.
    fn worst_case(&self, costs: &[f64], temperature: f64) -> (f64, Vec<f64>) {
        let max = costs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return (0.0, vec![0.0; costs.len()]);
        }
        let exps: Vec<f64> = costs.iter().map(|&c| ((c - max) / temperature).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let value = max + temperature * (sum.ln());
        let weights = exps.iter().map(|&e| e / sum).collect();
        (value, weights)
    }

    /// Objective at penalty weight `penalty_weight`; fills `grad` when given.
    fn evaluate(&self, vars: &[f64], penalty_weight: f64, grad: Option<&mut [f64]>) -> f64 {
        let pass = self.forward(vars);
        let child_costs: Vec<f64> = pass.children.iter().map(|c| c.stage).collect();
        let (branch_cost, child_weights) = match self.objective {
            ObjectiveMode::Expected => {
                let total: f64 = self
                    .slots
                    .iter()
                    .zip(&child_costs)
                    .map(|(slot, &c)| slot.cost_weight * c)
                    .sum();
                (total, self.slots.iter().map(|s| s.cost_weight).collect::<Vec<f64>>())
            }
            ObjectiveMode::WorstCase { temperature } => {
                if child_costs.is_empty() {
                    (0.0, Vec::new())
                } else {
                    self.worst_case(&child_costs, temperature)
                }
            }
        };
        let mut penalty = pass.root.penalty;
        for (slot, child) in self.slots.iter().zip(&pass.children) {
            if slot.enforce {
                penalty += child.penalty;
            }
        }
        let value = self.root_weight * pass.root.stage + branch_cost + penalty_weight * penalty;

        if let Some(grad) = grad {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut lambda_root = [0.0; 4];
            for ((slot_idx, slot), (child, &stage_w)) in self
                .slots
                .iter()
                .enumerate()
                .zip(pass.children.iter().zip(&child_weights))
            {
                let pen_w = if slot.enforce { penalty_weight } else { 0.0 };
                if stage_w == 0.0 && pen_w == 0.0 {
                    continue;
                }
                let lambda = self.backward_leg(child, stage_w, pen_w, Some(slot_idx), [0.0; 4], grad);
                for (acc, l) in lambda_root.iter_mut().zip(lambda) {
                    *acc += l;
                }
            }
            self.backward_leg(&pass.root, self.root_weight, penalty_weight, None, lambda_root, grad);
        }
        value
    }

    /// Reverse sweep over one leg. `lambda` enters at the leg's terminal
    /// state and the return value is the adjoint at the leg's initial state,
    /// with stage and penalty weights already folded in.
    fn backward_leg(
        &self,
        rec: &LegRecord,
        stage_w: f64,
        pen_w: f64,
        slot: Option<usize>,
        lambda_terminal: [f64; 4],
        grad: &mut [f64],
    ) -> [f64; 4] {
        let len = rec.inputs.len();
        let leg_start = if slot.is_some() { self.t_br } else { 0 };
        let z_index = |i: usize| match slot {
            Some(j) => self.input_index(j, leg_start + i),
            None => i,
        };
        let w = &self.weights;
        let mut l = lambda_terminal;
        for i in (0..len).rev() {
            let av_next = rec.av[i + 1];
            let hv_next = rec.hv[i + 1];

            // Stage and penalty contributions at the step's landing state.
            l[1] += stage_w * 2.0 * w.w_track * (av_next.vel - w.v_ref_av);
            l[0] -= stage_w * w.w_progress;
            if pen_w > 0.0 {
                let ve = margin_violation(
                    av_next,
                    hv_next,
                    &self.geometry,
                    self.limits.d_safe,
                    w.collision_ramp,
                    w.collision_buffer,
                );
                if ve.viol > 0.0 {
                    l[0] += pen_w * 2.0 * ve.viol * ve.d_av_pos;
                    l[2] += pen_w * 2.0 * ve.viol * ve.d_hv_pos;
                }
                let over = av_next.vel - self.limits.v_max;
                if over > 0.0 {
                    l[1] += pen_w * 2.0 * over;
                }
                let under = self.limits.v_min - av_next.vel;
                if under > 0.0 {
                    l[1] -= pen_w * 2.0 * under;
                }
            }

            // Direct input terms of this stage.
            let u = rec.inputs[i];
            let u_prev = if i == 0 { rec.u_before } else { rec.inputs[i - 1] };
            let rate = stage_w * 2.0 * w.w_accel_rate * (u - u_prev);
            let zi = z_index(i);
            grad[zi] += stage_w * 2.0 * w.w_accel * u + rate;
            if i > 0 {
                grad[z_index(i - 1)] -= rate;
            } else if leg_start > 0 {
                // Predecessor is the root's last input.
                grad[leg_start - 1] -= rate;
            }

            // Pull the adjoint through the two transitions.
            let (l_sa, l_va, l_sh, l_vh) = (l[0], l[1], l[2], l[3]);
            let av_exp = &rec.av_exp[i];
            let hv_exp = &rec.hv_exp[i];
            let pol = &rec.hv_pol[i];
            grad[zi] += l_sa * av_exp.dpos_daccel + l_va * av_exp.dvel_daccel;
            let hv_chain = l_sh * hv_exp.dpos_daccel + l_vh * hv_exp.dvel_daccel;
            l[0] = l_sa + hv_chain * pol.d_av_pos;
            l[1] = l_sa * av_exp.dpos_dvel + l_va * av_exp.dvel_dvel + hv_chain * pol.d_av_vel;
            l[2] = l_sh + hv_chain * pol.d_hv_pos;
            l[3] = l_sh * hv_exp.dpos_dvel + l_vh * hv_exp.dvel_dvel + hv_chain * pol.d_hv_vel;

            // Progress reward also references the step's starting position.
            l[0] += stage_w * w.w_progress;
        }
        l
    }

    /// Exact feasibility of a candidate: unsmoothed margins on every
    /// enforced leg plus the courtesy braking cap. Leg-initial states are
    /// measurements and are skipped.
    pub fn post_check(&self, vars: &[f64]) -> FeasibilityReport {
        let pass = self.forward(vars);
        let mut worst_margin = 0.0f64;
        let mut worst_braking = 0.0f64;
        let mut check_leg = |rec: &LegRecord| {
            if rec.av.len() > 1 {
                let margins =
                    collision_margin(&rec.av[1..], &rec.hv[1..], &self.geometry, self.limits.d_safe);
                for m in margins {
                    if m < 0.0 {
                        worst_margin = worst_margin.max(-m);
                    }
                }
            }
            let braking = predicted_hv_braking(&rec.hv, self.grid.dt);
            if braking > self.limits.hv_brake_limit {
                worst_braking = worst_braking.max(braking - self.limits.hv_brake_limit);
            }
        };
        check_leg(&pass.root);
        for (slot, child) in self.slots.iter().zip(&pass.children) {
            if slot.enforce {
                check_leg(child);
            }
        }
        FeasibilityReport { max_margin_violation: worst_margin, max_excess_braking: worst_braking }
    }

    /// Assemble the public plan from a solution vector.
    pub fn build_plan(&self, vars: &[f64], diagnostics: SolveDiagnostics) -> BranchPlan {
        let pass = self.forward(vars);
        let to_leg = |rec: &LegRecord, id: usize, probability: f64| PlanLeg {
            branch_id: id,
            probability,
            inputs: rec.inputs.iter().map(|&u| ControlInput::new(u)).collect(),
            av_states: rec.av.clone(),
            hv_states: rec.hv.clone(),
        };
        BranchPlan {
            root: to_leg(&pass.root, 0, self.root_weight),
            children: self
                .slots
                .iter()
                .zip(&pass.children)
                .map(|(slot, rec)| to_leg(rec, slot.id, slot.probability))
                .collect(),
            t_br: self.t_br,
            obs_steps: self.obs_steps,
            diagnostics,
        }
    }

    /// Map a previous plan onto this program's variables, advanced by
    /// `shift` steps (1 for the next control cycle, 0 for a re-solve of the
    /// same cycle). Missing tail values hold the last known input.
    pub fn warm_start_from(&self, plan: &BranchPlan, shift: usize) -> Vec<f64> {
        let (lo, hi) = self.bounds();
        let root_len = plan.root.inputs.len();
        let path_value = |leg: &PlanLeg, t: usize| -> f64 {
            let u = if t < root_len {
                plan.root.inputs.get(t).map(|u| u.accel)
            } else {
                leg.inputs
                    .get(t - root_len)
                    .or(leg.inputs.last())
                    .or(plan.root.inputs.last())
                    .map(|u| u.accel)
            };
            u.unwrap_or(0.0)
        };
        let reference_child = |id: usize| -> &PlanLeg {
            plan.children
                .iter()
                .find(|c| c.branch_id == id)
                .or_else(|| plan.active_child())
                .unwrap_or(&plan.root)
        };
        let n = self.num_vars();
        let mut vars = vec![0.0; n];
        let shared_end = self.t_br + self.obs_steps;
        let active = plan.active_child().unwrap_or(&plan.root);
        for (t, v) in vars.iter_mut().enumerate().take(shared_end) {
            *v = path_value(active, t + shift).clamp(lo, hi);
        }
        for (slot_idx, slot) in self.slots.iter().enumerate() {
            let leg = reference_child(slot.id);
            for i in 0..self.n_child {
                let t = shared_end + i;
                let zi = self.input_index(slot_idx, t);
                vars[zi] = path_value(leg, t + shift).clamp(lo, hi);
            }
        }
        vars
    }
}

/// Minimize the transcription with penalty continuation. Starts from the
/// warm vector when given; otherwise (or when `multi_start` is set) a small
/// set of diverse seeds competes and the best feasible result wins. When no
/// candidate passes the exact post-check, the fallback braking profile is
/// returned with `fallback` set.
pub fn solve(tr: &Transcription, warm: Option<Vec<f64>>, opts: &SolverOptions) -> BranchPlan {
    let (lo, hi) = tr.bounds();
    let n = tr.num_vars();
    let mut candidates: Vec<Vec<f64>> = Vec::new();
    let had_warm = warm.is_some();
    if let Some(w) = warm {
        debug_assert_eq!(w.len(), n);
        candidates.push(w);
    }
    if !had_warm || opts.multi_start {
        candidates.push(vec![0.0; n]);
        candidates.push(vec![0.55 * hi; n]);
        candidates.push(vec![0.55 * lo; n]);
    }

    struct Candidate {
        vars: Vec<f64>,
        diag: SolveDiagnostics,
    }
    let mut best: Option<Candidate> = None;
    for x0 in candidates {
        let mut x = x0;
        let mut penalty_weight = tr.weights.w_collision;
        let mut iterations = 0;
        let mut continuations = 0;
        let report = loop {
            let spg = minimize_box(
                |vars, grad| tr.evaluate(vars, penalty_weight, grad),
                &mut x,
                lo,
                hi,
                &opts.spg(),
            );
            iterations += spg.iterations;
            let report = tr.post_check(&x);
            if report.feasible() || continuations >= opts.max_continuations {
                break report;
            }
            penalty_weight *= 2.0;
            continuations += 1;
        };
        // Rank and report at the base penalty weight so candidates that
        // ended at different continuation weights stay comparable.
        let diag = SolveDiagnostics {
            cost: tr.evaluate(&x, tr.weights.w_collision, None),
            iterations,
            continuations,
            penalty_weight,
            max_violation: report.worst(),
            feasible: report.feasible(),
            ..SolveDiagnostics::default()
        };
        let better = match &best {
            None => true,
            Some(current) => match (diag.feasible, current.diag.feasible) {
                (true, false) => true,
                (false, true) => false,
                (true, true) => diag.cost < current.diag.cost,
                (false, false) => diag.max_violation < current.diag.max_violation,
            },
        };
        if better {
            best = Some(Candidate { vars: x, diag });
        }
    }

    let best = best.expect("at least one candidate is always attempted");
    if best.diag.feasible {
        return tr.build_plan(&best.vars, best.diag);
    }

    // Fallback: maximum braking everywhere. Safe by construction in every
    // bundled scenario (the AV yields), reported via the fallback flag.
    let brake = vec![lo; n];
    let report = tr.post_check(&brake);
    let diag = SolveDiagnostics {
        cost: tr.evaluate(&brake, tr.weights.w_collision, None),
        iterations: best.diag.iterations,
        continuations: best.diag.continuations,
        penalty_weight: best.diag.penalty_weight,
        max_violation: report.worst(),
        feasible: report.feasible(),
        fallback: true,
        ..SolveDiagnostics::default()
    };
    tr.build_plan(&brake, diag)
}

/// First input to apply: the root's while the branching step is ahead,
/// otherwise the active child's.
pub fn extract_control(
    plan: &BranchPlan,
    tree: &ScenarioTree,
    t_now: usize,
) -> Result<ControlInput, PlanError> {
    debug_assert_eq!(plan.t_br, tree.t_br, "plan and tree out of sync");
    if t_now < plan.t_br {
        plan.root.inputs.first().copied().ok_or(PlanError::EmptyPlan)
    } else {
        plan.active_child()
            .and_then(|leg| leg.inputs.first())
            .copied()
            .ok_or(PlanError::EmptyPlan)
    }
}

/// Everything fixed across one scenario's planning cycles.
#[derive(Debug, Clone)]
pub struct PlanningProblem {
    pub geometry: ConflictGeometry,
    pub weights: CostWeights,
    pub limits: PlannerConstraints,
    pub env: PolicyEnv,
    pub grid: TimeGrid,
    pub decision: DecisionModelParams,
    pub solver: SolverOptions,
}

/// A previous plan used to seed the next solve.
#[derive(Debug, Clone, Copy)]
pub struct WarmStart<'a> {
    pub plan: &'a BranchPlan,
    /// Control cycles elapsed since the plan was made.
    pub shift: usize,
}

impl PlanningProblem {
    pub fn from_config(config: &ScenarioConfig) -> Result<Self, ConfigError> {
        Ok(Self {
            geometry: config.geometry(),
            weights: config.weights,
            limits: config.constraints,
            env: config.policy_env(),
            grid: config.time_grid()?,
            decision: config.decision.clone(),
            solver: config.solver,
        })
    }

    pub fn transcription(
        &self,
        tree: &ScenarioTree,
        options: TranscriptionOptions,
        x_init_hv: VehicleState,
        x_init_av: VehicleState,
        u_prev: f64,
    ) -> Transcription {
        transcribe(
            tree,
            self.geometry,
            self.weights,
            self.limits,
            self.env,
            self.grid,
            x_init_hv,
            x_init_av,
            u_prev,
            options,
        )
    }

    /// Branch-MPC plan. In crossing-frequency mode with more than one live
    /// child this is the probability fixed point; otherwise a single solve
    /// on the tree's probabilities.
    pub fn plan_branch(
        &self,
        tree: &ScenarioTree,
        x_init_hv: VehicleState,
        x_init_av: VehicleState,
        u_prev: f64,
        warm: Option<WarmStart>,
    ) -> Result<BranchPlan, PlanError> {
        let needs_fixed_point = matches!(self.decision.mode, DecisionMode::CrossingFrequency)
            && tree.active_children().count() > 1;
        if needs_fixed_point {
            probability_fixed_point(self, tree, x_init_hv, x_init_av, u_prev, warm)
        } else {
            let tr = self.transcription(tree, TranscriptionOptions::default(), x_init_hv, x_init_av, u_prev);
            let warm_vars = warm.map(|w| tr.warm_start_from(w.plan, w.shift));
            Ok(solve(&tr, warm_vars, &self.solver))
        }
    }
}

/// Alternate solving and re-evaluating branch probabilities until the
/// distribution settles (infinity-norm change below the configured
/// tolerance) or the round budget runs out. Returns the last plan with the
/// final probabilities installed.
pub fn probability_fixed_point(
    problem: &PlanningProblem,
    tree: &ScenarioTree,
    x_init_hv: VehicleState,
    x_init_av: VehicleState,
    u_prev: f64,
    warm: Option<WarmStart>,
) -> Result<BranchPlan, PlanError> {
    let mut current = tree.clone();
    let mut plan: Option<BranchPlan> = None;
    let mut rounds = 0;
    let mut converged = false;
    for _ in 0..problem.solver.fixed_point_rounds {
        rounds += 1;
        let tr = problem.transcription(
            &current,
            TranscriptionOptions::default(),
            x_init_hv,
            x_init_av,
            u_prev,
        );
        let warm_vars = match (&plan, warm) {
            // Later rounds re-solve the same cycle: no shift.
            (Some(prev), _) => Some(tr.warm_start_from(prev, 0)),
            (None, Some(w)) => Some(tr.warm_start_from(w.plan, w.shift)),
            (None, None) => None,
        };
        // Keep exploring alternative starts every round so the iteration can
        // jump between the assertive and yielding equilibria.
        let mut opts = problem.solver;
        opts.multi_start = true;
        let solved = solve(&tr, warm_vars, &opts);

        let prefix_av = solved.shared_av_prefix();
        let prefix_hv = solved.shared_hv_prefix();
        let probabilities = branch_probabilities(
            &current,
            &prefix_av,
            &prefix_hv,
            &problem.decision,
            problem.geometry.s_conflict,
            problem.grid.dt,
        )?;
        let delta = current
            .children
            .iter()
            .zip(&probabilities)
            .map(|(c, &p)| (c.probability - p).abs())
            .fold(0.0, f64::max);
        current = current.with_probabilities(&probabilities)?;
        plan = Some(solved);
        if delta < problem.solver.fixed_point_tolerance {
            converged = true;
            break;
        }
    }
    let mut plan = plan.expect("fixed_point_rounds is validated positive");
    for leg in &mut plan.children {
        if let Some(child) = current.child(leg.branch_id) {
            leg.probability = child.probability;
        }
    }
    plan.diagnostics.fixed_point_rounds = rounds;
    plan.diagnostics.fixed_point_converged = converged;
    Ok(plan)
}
