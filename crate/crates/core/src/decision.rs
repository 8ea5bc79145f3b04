//! Human decision model: the probability of each post-branching policy as a
//! function of the scene the human is predicted to face at the decision
//! point.
//!
//! In crossing-frequency mode the probability that the human commits to
//! crossing is a logistic function of the AV's time-to-arrival at the
//! conflict point, evaluated at the branching step: the longer the gap the
//! AV leaves, the more likely the human takes it. Fixed mode pins the
//! distribution in configuration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::VehicleState;
use crate::tree::ScenarioTree;

/// How branch probabilities are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DecisionMode {
    /// Probabilities pinned in configuration, one per child branch.
    FixedProbabilities { probabilities: Vec<f64> },
    /// Gap-acceptance logistic over a cross/stop policy pair.
    CrossingFrequency,
}

/// Parameters of the gap-acceptance model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionModelParams {
    /// Logistic slope [1/s].
    pub slope: f64,
    /// Time-to-arrival at which crossing and stopping are equally likely [s].
    pub tta_mid: f64,
    #[serde(flatten)]
    pub mode: DecisionMode,
}

#[derive(Debug, Error)]
pub enum DecisionError {
    #[error("fixed probability count {got} does not match child branch count {expected}")]
    CountMismatch { got: usize, expected: usize },
    #[error("crossing-frequency mode needs exactly one crossing child and one stopping child")]
    NotCrossStopPair,
    #[error("plan prefix of {len} states does not cover the branching step {t_br}")]
    PrefixTooShort { len: usize, t_br: usize },
}

/// Probability that the human commits to crossing given the AV's
/// time-to-arrival at the conflict point [s].
pub fn crossing_probability(tta_av: f64, params: &DecisionModelParams) -> f64 {
    1.0 / (1.0 + (-params.slope * (tta_av - params.tta_mid)).exp())
}

/// First time [s] at which a state sequence reaches `s_target`, linearly
/// interpolated between samples. `None` if the sequence never gets there.
pub fn first_crossing_time(states: &[VehicleState], s_target: f64, dt: f64) -> Option<f64> {
    let first = states.first()?;
    if first.pos >= s_target {
        return Some(0.0);
    }
    for k in 1..states.len() {
        if states[k].pos >= s_target {
            let prev = states[k - 1].pos;
            let frac = (s_target - prev) / (states[k].pos - prev);
            return Some(((k - 1) as f64 + frac) * dt);
        }
    }
    None
}

/// Time from `from_step` until the sequence reaches `s_target` [s]. When the
/// sequence ends short of the target, the remaining distance is extrapolated
/// at the terminal speed (floored at 0.1 m/s so the result stays finite).
pub fn time_to_arrival(states: &[VehicleState], s_target: f64, from_step: usize, dt: f64) -> f64 {
    let t_from = from_step as f64 * dt;
    match first_crossing_time(states, s_target, dt) {
        Some(t_cross) => (t_cross - t_from).max(0.0),
        None => {
            let last = states.last().expect("time_to_arrival needs a nonempty sequence");
            let t_end = (states.len() - 1) as f64 * dt;
            (t_end - t_from).max(0.0) + (s_target - last.pos) / last.vel.max(0.1)
        }
    }
}

/// Per-child branch probabilities for `tree`, in child order.
///
/// Fixed mode returns the configured distribution. Crossing-frequency mode
/// evaluates the logistic at the AV's time-to-arrival at `s_conflict`,
/// measured at the branching step from the planned AV prefix, and assigns
/// the complement to the stopping child. Both prefixes must cover the
/// branching step.
pub fn branch_probabilities(
    tree: &ScenarioTree,
    av_plan_prefix: &[VehicleState],
    hv_prefix: &[VehicleState],
    params: &DecisionModelParams,
    s_conflict: f64,
    dt: f64,
) -> Result<Vec<f64>, DecisionError> {
    match &params.mode {
        DecisionMode::FixedProbabilities { probabilities } => {
            if probabilities.len() != tree.children.len() {
                return Err(DecisionError::CountMismatch {
                    got: probabilities.len(),
                    expected: tree.children.len(),
                });
            }
            Ok(probabilities.clone())
        }
        DecisionMode::CrossingFrequency => {
            for prefix in [av_plan_prefix, hv_prefix] {
                if prefix.len() < tree.t_br + 1 {
                    return Err(DecisionError::PrefixTooShort {
                        len: prefix.len(),
                        t_br: tree.t_br,
                    });
                }
            }
            if tree.children.len() != 2 {
                return Err(DecisionError::NotCrossStopPair);
            }
            let cross_idx = tree.children.iter().position(|c| c.policy.is_cross_like());
            let stop_idx = tree.children.iter().position(|c| c.policy.is_stop_like());
            let (cross_idx, stop_idx) = match (cross_idx, stop_idx) {
                (Some(c), Some(s)) if c != s => (c, s),
                _ => return Err(DecisionError::NotCrossStopPair),
            };
            let tta = time_to_arrival(av_plan_prefix, s_conflict, tree.t_br, dt);
            let p_cross = crossing_probability(tta, params);
            let mut probabilities = vec![0.0; 2];
            probabilities[cross_idx] = p_cross;
            probabilities[stop_idx] = 1.0 - p_cross;
            Ok(probabilities)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policies::PolicyKind;
    use crate::tree::{BranchNode, ScenarioTree};
    use proptest::prelude::*;

    fn cf_params(slope: f64, tta_mid: f64) -> DecisionModelParams {
        DecisionModelParams { slope, tta_mid, mode: DecisionMode::CrossingFrequency }
    }

    fn cross_stop_tree(t_br: usize) -> ScenarioTree {
        ScenarioTree {
            root: BranchNode {
                id: 0,
                policy: PolicyKind::ConstantSpeed,
                probability: 1.0,
                t_start: 0,
                t_end: t_br,
                parent: None,
            },
            children: vec![
                BranchNode {
                    id: 1,
                    policy: PolicyKind::Cross { v_ref: 10.0 },
                    probability: 0.5,
                    t_start: t_br + 1,
                    t_end: 50,
                    parent: Some(0),
                },
                BranchNode {
                    id: 2,
                    policy: PolicyKind::Stop { stop_line: 70.0 },
                    probability: 0.5,
                    t_start: t_br + 1,
                    t_end: 50,
                    parent: Some(0),
                },
            ],
            t_br,
            dt_obs_steps: 3,
        }
    }

    #[test]
    fn logistic_midpoint_and_tails() {
        let params = cf_params(1.5, 4.0);
        assert!((crossing_probability(4.0, &params) - 0.5).abs() < 1e-15);
        // slope 1.5, tta 2, mid 4 -> 1/(1+e^3)
        let expected = 1.0 / (1.0 + 3.0f64.exp());
        assert!((crossing_probability(2.0, &params) - expected).abs() < 1e-15);
        assert!((expected - 0.047425873177566779).abs() < 1e-15);
        assert!(crossing_probability(1e9, &params) > 1.0 - 1e-12);
        assert!(crossing_probability(-1e9, &params) < 1e-12);
    }

    #[test]
    fn fixed_mode_returns_configuration() {
        let tree = cross_stop_tree(10);
        let params = DecisionModelParams {
            slope: 1.0,
            tta_mid: 4.0,
            mode: DecisionMode::FixedProbabilities { probabilities: vec![0.5, 0.5] },
        };
        let p = branch_probabilities(&tree, &[VehicleState::new(0.0, 0.0); 11], &[VehicleState::new(0.0, 0.0); 11], &params, 70.0, 0.2).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn fixed_mode_count_mismatch_is_error() {
        let tree = cross_stop_tree(10);
        let params = DecisionModelParams {
            slope: 1.0,
            tta_mid: 4.0,
            mode: DecisionMode::FixedProbabilities { probabilities: vec![1.0] },
        };
        assert!(matches!(
            branch_probabilities(&tree, &[], &[], &params, 70.0, 0.2),
            Err(DecisionError::CountMismatch { got: 1, expected: 2 })
        ));
    }

    #[test]
    fn crossing_mode_needs_covering_prefix() {
        let tree = cross_stop_tree(10);
        let params = cf_params(1.5, 4.0);
        let short = vec![VehicleState::new(0.0, 10.0); 5];
        assert!(matches!(
            branch_probabilities(&tree, &short, &short, &params, 70.0, 0.2),
            Err(DecisionError::PrefixTooShort { .. })
        ));
    }

    #[test]
    fn already_arrived_av_maximizes_stop_probability() {
        // AV past the conflict point at the branching step: tta = 0, the
        // crossing probability bottoms out at 1/(1+e^{slope*mid}).
        let tree = cross_stop_tree(2);
        let params = cf_params(1.5, 4.0);
        let prefix = vec![VehicleState::new(80.0, 10.0); 3];
        let p = branch_probabilities(&tree, &prefix, &prefix, &params, 70.0, 0.2).unwrap();
        let floor = 1.0 / (1.0 + (1.5f64 * 4.0).exp());
        assert!((p[0] - floor).abs() < 1e-12);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn interpolated_crossing_time() {
        let dt = 0.5;
        let states = vec![
            VehicleState::new(0.0, 10.0),
            VehicleState::new(5.0, 10.0),
            VehicleState::new(10.0, 10.0),
        ];
        // Crosses 7.5 m halfway through the second interval.
        let t = first_crossing_time(&states, 7.5, dt).unwrap();
        assert!((t - 0.75).abs() < 1e-12);
        assert_eq!(first_crossing_time(&states, 20.0, dt), None);
        assert_eq!(first_crossing_time(&states, -1.0, dt), Some(0.0));
    }

    #[test]
    fn extrapolation_beyond_prefix_uses_terminal_speed() {
        let dt = 0.2;
        // Ends at 10 m short of the target moving 5 m/s: 2 s extra.
        let states = vec![VehicleState::new(0.0, 5.0), VehicleState::new(1.0, 5.0)];
        let tta = time_to_arrival(&states, 11.0, 0, dt);
        assert!((tta - (0.2 + 2.0)).abs() < 1e-12);
        // Stationary terminal state: speed floored at 0.1 m/s.
        let parked = vec![VehicleState::new(0.0, 0.0), VehicleState::new(0.0, 0.0)];
        let tta = time_to_arrival(&parked, 1.0, 0, dt);
        assert!((tta - (0.2 + 10.0)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn probabilities_normalize_and_stay_in_unit_interval(
            slope in 0.1f64..5.0,
            tta_mid in 0.5f64..10.0,
            t_br in 0usize..30,
            v0 in 0.0f64..25.0,
            accel in -2.0f64..2.0,
            s_conflict in 10.0f64..200.0,
        ) {
            let tree = cross_stop_tree(t_br);
            let params = cf_params(slope, tta_mid);
            let dt = 0.2;
            let mut states = vec![VehicleState::new(0.0, v0)];
            for _ in 0..40 {
                let prev = *states.last().unwrap();
                states.push(crate::dynamics::step(prev, crate::dynamics::ControlInput::new(accel), dt).unwrap());
            }
            let p = branch_probabilities(&tree, &states, &states, &params, s_conflict, dt).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        #[test]
        fn crossing_probability_monotone_in_tta(
            slope in 0.1f64..5.0,
            tta_mid in 0.5f64..10.0,
            tta_a in 0.0f64..20.0,
            tta_b in 0.0f64..20.0,
        ) {
            let params = cf_params(slope, tta_mid);
            let (lo, hi) = if tta_a <= tta_b { (tta_a, tta_b) } else { (tta_b, tta_a) };
            prop_assert!(crossing_probability(hi, &params) >= crossing_probability(lo, &params));
        }

        #[test]
        fn fixed_mode_is_scene_independent(
            v0 in 0.0f64..25.0,
            t_br in 0usize..20,
        ) {
            let tree = cross_stop_tree(t_br);
            let params = DecisionModelParams {
                slope: 2.0,
                tta_mid: 3.0,
                mode: DecisionMode::FixedProbabilities { probabilities: vec![0.3, 0.7] },
            };
            let fast = vec![VehicleState::new(0.0, v0 + 10.0); t_br + 1];
            let slow = vec![VehicleState::new(0.0, v0); t_br + 1];
            let a = branch_probabilities(&tree, &fast, &fast, &params, 70.0, 0.2).unwrap();
            let b = branch_probabilities(&tree, &slow, &slow, &params, 70.0, 0.2).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
