//! Scenario-tree construction.
//!
//! The tree has depth one: a root branch covering the steps before the
//! human's decision point and one child branch per post-decision policy.
//! The branching step is when the triggering agent is predicted to reach
//! the branching position s_br; for the first Δt_obs after it the planner
//! cannot yet tell the children apart, which the transcription enforces by
//! sharing input variables.

use thiserror::Error;

use crate::config::{ScenarioConfig, ScenarioKind};
use crate::decision::DecisionMode;
use crate::dynamics::{TimeGrid, VehicleState};
use crate::policies::{policy_accel, PolicyEnv, PolicyKind};

/// One branch of the scenario tree, covering state indices
/// `t_start..=t_end` of the planning horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchNode {
    /// 0 for the root, 1..=J for children, in configuration order.
    pub id: usize,
    pub policy: PolicyKind,
    pub probability: f64,
    pub t_start: usize,
    pub t_end: usize,
    pub parent: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTree {
    pub root: BranchNode,
    pub children: Vec<BranchNode>,
    /// Branching step: last state index covered by the root.
    pub t_br: usize,
    /// Shared observation window after branching, in steps.
    pub dt_obs_steps: usize,
}

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("scenario needs at least one post-branching policy")]
    EmptyPolicySet,
    #[error("fixed probability count {got} does not match policy count {expected}")]
    ProbabilityCountMismatch { got: usize, expected: usize },
    #[error("branch id {0} does not exist in the tree")]
    UnknownBranch(usize),
    #[error("truth cannot be detected at step {t_now}: observation window runs through step {window_end}")]
    DetectionTooEarly { t_now: usize, window_end: usize },
}

impl ScenarioTree {
    /// Last state index of the planning horizon.
    pub fn horizon(&self) -> usize {
        self.children.first().map_or(self.root.t_end, |c| c.t_end)
    }

    pub fn child(&self, id: usize) -> Option<&BranchNode> {
        self.children.iter().find(|c| c.id == id)
    }

    /// Children that still carry probability mass.
    pub fn active_children(&self) -> impl Iterator<Item = &BranchNode> {
        self.children.iter().filter(|c| c.probability > 0.0)
    }

    /// Exactly one child left with probability one.
    pub fn is_collapsed(&self) -> bool {
        self.active_children().count() == 1
            && self.active_children().all(|c| c.probability == 1.0)
    }

    /// Same tree with the shared observation window clamped to `steps`
    /// (and to the horizon). Used by the closed loop to shrink the window
    /// as the detection time approaches.
    pub fn with_observation_window(mut self, steps: usize) -> Self {
        self.dt_obs_steps = steps.min(self.horizon() - self.t_br);
        self
    }

    /// Same tree with new child probabilities, in child order.
    pub fn with_probabilities(mut self, probabilities: &[f64]) -> Result<Self, TreeError> {
        if probabilities.len() != self.children.len() {
            return Err(TreeError::ProbabilityCountMismatch {
                got: probabilities.len(),
                expected: self.children.len(),
            });
        }
        for (child, &p) in self.children.iter_mut().zip(probabilities) {
            child.probability = p;
        }
        Ok(self)
    }

    /// Tree reduced to the children selected by `keep` (probability mass
    /// renormalized onto them is the caller's business; this only drops
    /// branches). Used to plan on the known branch once truth is available.
    pub fn pruned_to(&self, keep: usize) -> Result<Self, TreeError> {
        let child = self.child(keep).ok_or(TreeError::UnknownBranch(keep))?;
        let mut kept = child.clone();
        kept.probability = 1.0;
        Ok(ScenarioTree {
            root: self.root.clone(),
            children: vec![kept],
            t_br: self.t_br,
            dt_obs_steps: self.dt_obs_steps,
        })
    }
}

/// Predicted step at which `agent`, propagated under `root_policy` alone,
/// first reaches `s_branch`. Returns 0 when it is already there and the
/// horizon length when it never arrives within the horizon.
pub fn estimate_branching_step(
    agent: VehicleState,
    root_policy: &PolicyKind,
    s_branch: f64,
    grid: &TimeGrid,
    env: &PolicyEnv,
) -> usize {
    if agent.pos >= s_branch {
        return 0;
    }
    // A far-behind placeholder keeps any interaction term disengaged: the
    // root-branch prediction is decoupled from the AV plan.
    let ghost = VehicleState::new(agent.pos - 1e9, 0.0);
    let mut state = agent;
    for k in 1..=grid.horizon_steps {
        let u = policy_accel(root_policy, state, ghost, env);
        state = crate::dynamics::step_expansion(state, u.accel, grid.dt).next;
        if state.pos >= s_branch {
            return k;
        }
    }
    grid.horizon_steps
}

/// Build the scenario tree for the current scene.
///
/// The branching trigger is the human vehicle under the pre-decision policy,
/// except in the traffic-light scenario where visibility is tied to the AV's
/// own position: there the AV, projected at constant speed, is the trigger.
/// In crossing-frequency mode the child probabilities start uniform; the
/// planner's fixed-point pass installs the model-consistent values.
pub fn build_tree(
    config: &ScenarioConfig,
    grid: &TimeGrid,
    hv: VehicleState,
    av: VehicleState,
) -> Result<ScenarioTree, TreeError> {
    if config.hv_policies_after.is_empty() {
        return Err(TreeError::EmptyPolicySet);
    }
    let env = config.policy_env();
    let t_br = match config.kind {
        ScenarioKind::TrafficLight => {
            estimate_branching_step(av, &PolicyKind::ConstantSpeed, config.s_branch, grid, &env)
        }
        _ => estimate_branching_step(hv, &config.hv_policy_before, config.s_branch, grid, &env),
    };
    let dt_obs_steps = config.dt_obs_steps(grid).min(grid.horizon_steps - t_br);
    let count = config.hv_policies_after.len();
    let probabilities = match &config.decision.mode {
        DecisionMode::FixedProbabilities { probabilities } => {
            if probabilities.len() != count {
                return Err(TreeError::ProbabilityCountMismatch {
                    got: probabilities.len(),
                    expected: count,
                });
            }
            probabilities.clone()
        }
        DecisionMode::CrossingFrequency => vec![1.0 / count as f64; count],
    };
    let root = BranchNode {
        id: 0,
        policy: config.hv_policy_before.clone(),
        probability: 1.0,
        t_start: 0,
        t_end: t_br,
        parent: None,
    };
    let children = config
        .hv_policies_after
        .iter()
        .enumerate()
        .map(|(i, policy)| BranchNode {
            id: i + 1,
            policy: policy.clone(),
            probability: probabilities[i],
            t_start: t_br + 1,
            t_end: grid.horizon_steps,
            parent: Some(0),
        })
        .collect();
    Ok(ScenarioTree { root, children, t_br, dt_obs_steps })
}

/// Concentrate all probability on the observed branch once the truth is
/// known. The root keeps its interval but carries no more probability mass.
/// Detection cannot happen before the observation window has run out.
pub fn collapse_to_truth(
    tree: &ScenarioTree,
    true_branch: usize,
    t_now: usize,
) -> Result<ScenarioTree, TreeError> {
    if tree.child(true_branch).is_none() {
        return Err(TreeError::UnknownBranch(true_branch));
    }
    let window_end = tree.t_br + tree.dt_obs_steps;
    if t_now <= window_end {
        return Err(TreeError::DetectionTooEarly { t_now, window_end });
    }
    let mut collapsed = tree.clone();
    collapsed.root.probability = 0.0;
    for child in &mut collapsed.children {
        child.probability = if child.id == true_branch { 1.0 } else { 0.0 };
    }
    Ok(collapsed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::test_fixtures;
    use proptest::prelude::*;

    fn env() -> PolicyEnv {
        PolicyEnv {
            default_gains: crate::policies::InteractionParams {
                headway_ref: 15.0,
                speed_gain: 0.6,
                headway_gain: 0.2,
                max_braking: 4.0,
            },
            accel_limit: 3.0,
        }
    }

    #[test]
    fn branching_step_constant_speed() {
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let k = estimate_branching_step(
            VehicleState::new(40.0, 10.0),
            &PolicyKind::ConstantSpeed,
            50.0,
            &grid,
            &env(),
        );
        assert_eq!(k, 1);
    }

    #[test]
    fn branching_step_already_crossed() {
        let grid = TimeGrid::new(0.2, 50).unwrap();
        let k = estimate_branching_step(
            VehicleState::new(55.0, 10.0),
            &PolicyKind::ConstantSpeed,
            50.0,
            &grid,
            &env(),
        );
        assert_eq!(k, 0);
    }

    #[test]
    fn branching_step_stationary_saturates_at_horizon() {
        let grid = TimeGrid::new(0.2, 50).unwrap();
        let k = estimate_branching_step(
            VehicleState::new(0.0, 0.0),
            &PolicyKind::ConstantSpeed,
            50.0,
            &grid,
            &env(),
        );
        assert_eq!(k, 50);
    }

    #[test]
    fn branching_step_matches_brute_force_scan() {
        // Independent check: scan an explicitly rolled trajectory.
        let grid = TimeGrid::new(0.2, 50).unwrap();
        let start = VehicleState::new(0.0, 7.3);
        let k = estimate_branching_step(start, &PolicyKind::ConstantSpeed, 50.0, &grid, &env());
        let mut state = start;
        let mut expected = grid.horizon_steps;
        for step in 1..=grid.horizon_steps {
            state = crate::dynamics::step(state, crate::dynamics::ControlInput::new(0.0), grid.dt).unwrap();
            if state.pos >= 50.0 {
                expected = step;
                break;
            }
        }
        assert_eq!(k, expected);
        assert_eq!(k, 35); // 50 m at 7.3 m/s = 6.849 s -> first 0.2 s step past is 35
    }

    #[test]
    fn build_tree_tiles_the_horizon() {
        let config = test_fixtures::merging_config();
        let grid = config.time_grid().unwrap();
        let tree = build_tree(&config, &grid, config.hv_init, config.av_init).unwrap();
        assert_eq!(tree.root.t_start, 0);
        assert_eq!(tree.root.t_end, tree.t_br);
        for child in &tree.children {
            assert_eq!(child.t_start, tree.t_br + 1);
            assert_eq!(child.t_end, grid.horizon_steps);
            assert_eq!(child.parent, Some(0));
        }
        assert_eq!(tree.root.probability, 1.0);
        let mass: f64 = tree.children.iter().map(|c| c.probability).sum();
        assert!((mass - 1.0).abs() < 1e-12);
        assert!(tree.t_br + tree.dt_obs_steps <= grid.horizon_steps);
    }

    #[test]
    fn build_tree_rejects_empty_policy_set() {
        let mut config = test_fixtures::merging_config();
        config.hv_policies_after.clear();
        let grid = config.time_grid().unwrap();
        assert!(matches!(
            build_tree(&config, &grid, config.hv_init, config.av_init),
            Err(TreeError::EmptyPolicySet)
        ));
    }

    #[test]
    fn observation_window_shrinks_near_horizon() {
        // HV so close to s_br that t_br + dt_obs would overrun the horizon.
        let mut config = test_fixtures::merging_config();
        config.hv_init = VehicleState::new(config.s_branch - 0.5, 10.0);
        config.grid.horizon_steps = 1;
        let grid = config.time_grid().unwrap();
        let tree = build_tree(&config, &grid, config.hv_init, config.av_init).unwrap();
        assert!(tree.t_br + tree.dt_obs_steps <= grid.horizon_steps);
    }

    #[test]
    fn collapse_moves_all_mass_to_truth() {
        let config = test_fixtures::traffic_light_config();
        let grid = config.time_grid().unwrap();
        let tree = build_tree(&config, &grid, config.hv_init, config.av_init).unwrap();
        let t_now = tree.t_br + tree.dt_obs_steps + 1;
        let collapsed = collapse_to_truth(&tree, 2, t_now).unwrap();
        assert_eq!(collapsed.root.probability, 0.0);
        assert_eq!(collapsed.child(1).unwrap().probability, 0.0);
        assert_eq!(collapsed.child(2).unwrap().probability, 1.0);
        assert!(collapsed.is_collapsed());

        // Idempotent under the same truth.
        let again = collapse_to_truth(&collapsed, 2, t_now).unwrap();
        assert_eq!(again, collapsed);
    }

    #[test]
    fn collapse_rejects_unknown_branch_and_early_detection() {
        let config = test_fixtures::traffic_light_config();
        let grid = config.time_grid().unwrap();
        let tree = build_tree(&config, &grid, config.hv_init, config.av_init).unwrap();
        assert!(matches!(collapse_to_truth(&tree, 99, 1000), Err(TreeError::UnknownBranch(99))));
        assert!(matches!(
            collapse_to_truth(&tree, 1, tree.t_br + tree.dt_obs_steps),
            Err(TreeError::DetectionTooEarly { .. })
        ));
    }

    proptest! {
        #[test]
        fn branching_trigger_boundary(
            offset in -20.0f64..20.0,
            vel in 0.5f64..20.0,
        ) {
            let grid = TimeGrid::new(0.2, 50).unwrap();
            let s_branch = 50.0;
            let agent = VehicleState::new(s_branch + offset, vel);
            let k = estimate_branching_step(agent, &PolicyKind::ConstantSpeed, s_branch, &grid, &env());
            if offset >= 0.0 {
                prop_assert_eq!(k, 0);
            } else {
                prop_assert!(k >= 1);
                // The step before the reported one must still be short of the line.
                let states = crate::dynamics::rollout(
                    agent,
                    &vec![crate::dynamics::ControlInput::new(0.0); grid.horizon_steps],
                    grid.dt,
                ).unwrap();
                if k < grid.horizon_steps {
                    prop_assert!(states[k].pos >= s_branch);
                }
                prop_assert!(states[k - 1].pos < s_branch);
            }
        }
    }
}
