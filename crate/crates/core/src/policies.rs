//! Human-driver feedback policies.
//!
//! Inside every branch of the scenario tree the human vehicle (HV) is
//! propagated by one of these laws. Pre-decision policies depend only on the
//! HV's own state; post-decision policies may also react to the autonomous
//! vehicle (AV), which is what couples the planner's decisions to the human
//! prediction. All laws are total functions clamped to the acceleration box
//! the model credits the human with.

use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlInput, VehicleState};

/// Gains and limits of the headway-regulating feedback law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionParams {
    /// Desired gap to the vehicle ahead [m].
    pub headway_ref: f64,
    /// Velocity feedback gain [1/s].
    pub speed_gain: f64,
    /// Gap feedback gain [1/s^2].
    pub headway_gain: f64,
    /// Largest braking the model credits the human with [m/s^2, positive].
    pub max_braking: f64,
}

/// Feedback law selecting the HV acceleration from the scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    /// Zero acceleration regardless of the scene.
    ConstantSpeed,
    /// Proportional tracking of a reference speed; ignores the AV.
    VelocityTrack { v_ref: f64 },
    /// Tracks `v_ref` but yields to the AV when the AV is ahead along the
    /// shared path: the commanded acceleration is the more cautious of the
    /// tracking term and a headway-regulating term.
    VelocityAdapt {
        v_ref: f64,
        #[serde(flatten)]
        params: InteractionParams,
    },
    /// Brakes to rest at a stop line; never accelerates.
    Stop { stop_line: f64 },
    /// Keeps speed through the conflict region. Same law as `VelocityTrack`;
    /// kept as a distinct variant so the decision model can tell the two
    /// outcomes of a cross/stop pair apart.
    Cross { v_ref: f64 },
}

impl PolicyKind {
    /// Outcomes that commit to entering the conflict region.
    pub fn is_cross_like(&self) -> bool {
        matches!(self, PolicyKind::Cross { .. })
    }

    /// Outcomes that yield before the conflict region.
    pub fn is_stop_like(&self) -> bool {
        matches!(self, PolicyKind::Stop { .. })
    }

    /// Whether the law reads the AV state at all.
    pub fn interacts_with_av(&self) -> bool {
        matches!(self, PolicyKind::VelocityAdapt { .. })
    }
}

/// Scenario-wide context for policy evaluation: default gains for the laws
/// that do not carry their own, and the acceleration ceiling credited to the
/// human.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyEnv {
    pub default_gains: InteractionParams,
    /// Upper acceleration bound for every policy [m/s^2].
    pub accel_limit: f64,
}

/// Clamped policy acceleration together with its partial derivatives with
/// respect to the four scene coordinates, consistent with the forward clamp
/// decisions (zero in saturated regimes).
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct PolicyExpansion {
    pub accel: f64,
    pub d_hv_pos: f64,
    pub d_hv_vel: f64,
    pub d_av_pos: f64,
    pub d_av_vel: f64,
}

pub(crate) fn policy_accel_expansion(
    kind: &PolicyKind,
    hv: VehicleState,
    av: VehicleState,
    env: &PolicyEnv,
) -> PolicyExpansion {
    let mut exp = PolicyExpansion::default();
    let brake_limit = match kind {
        PolicyKind::ConstantSpeed => {
            exp.accel = 0.0;
            env.default_gains.max_braking
        }
        PolicyKind::VelocityTrack { v_ref } | PolicyKind::Cross { v_ref } => {
            let gains = env.default_gains;
            exp.accel = gains.speed_gain * (v_ref - hv.vel);
            exp.d_hv_vel = -gains.speed_gain;
            gains.max_braking
        }
        PolicyKind::VelocityAdapt { v_ref, params } => {
            let track = params.speed_gain * (v_ref - hv.vel);
            let gap = av.pos - hv.pos;
            let follow_active = gap > 0.0 && {
                let follow = params.headway_gain * (gap - params.headway_ref)
                    + params.speed_gain * (av.vel - hv.vel);
                follow < track
            };
            if follow_active {
                exp.accel = params.headway_gain * (gap - params.headway_ref)
                    + params.speed_gain * (av.vel - hv.vel);
                exp.d_hv_pos = -params.headway_gain;
                exp.d_hv_vel = -params.speed_gain;
                exp.d_av_pos = params.headway_gain;
                exp.d_av_vel = params.speed_gain;
            } else {
                exp.accel = track;
                exp.d_hv_vel = -params.speed_gain;
            }
            params.max_braking
        }
        PolicyKind::Stop { stop_line } => {
            let gains = env.default_gains;
            let brake = gains.headway_gain * (stop_line - hv.pos) - gains.speed_gain * hv.vel;
            if brake < 0.0 {
                exp.accel = brake;
                exp.d_hv_pos = -gains.headway_gain;
                exp.d_hv_vel = -gains.speed_gain;
            }
            gains.max_braking
        }
    };
    let clamped = exp.accel.clamp(-brake_limit, env.accel_limit);
    if clamped != exp.accel {
        exp = PolicyExpansion { accel: clamped, ..PolicyExpansion::default() };
    }
    exp
}

/// Acceleration commanded by `kind` for the human vehicle given the scene.
pub fn policy_accel(
    kind: &PolicyKind,
    hv: VehicleState,
    av: VehicleState,
    env: &PolicyEnv,
) -> ControlInput {
    ControlInput::new(policy_accel_expansion(kind, hv, av, env).accel)
}

/// Piecewise HV input: `before` while the HV has not reached the branching
/// position, `after` from there on (inclusive).
pub fn hv_input(
    hv: VehicleState,
    av: VehicleState,
    s_branch: f64,
    before: &PolicyKind,
    after: &PolicyKind,
    env: &PolicyEnv,
) -> ControlInput {
    if hv.pos < s_branch {
        policy_accel(before, hv, av, env)
    } else {
        policy_accel(after, hv, av, env)
    }
}

/// Largest deceleration implied by an HV state sequence, as a positive
/// magnitude [m/s^2]. Zero when the sequence never slows down or is shorter
/// than two states.
pub fn predicted_hv_braking(leg: &[VehicleState], dt: f64) -> f64 {
    leg.windows(2)
        .map(|pair| (pair[0].vel - pair[1].vel) / dt)
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn env() -> PolicyEnv {
        PolicyEnv {
            default_gains: InteractionParams {
                headway_ref: 15.0,
                speed_gain: 0.6,
                headway_gain: 0.2,
                max_braking: 4.0,
            },
            accel_limit: 3.0,
        }
    }

    fn adapt(v_ref: f64) -> PolicyKind {
        PolicyKind::VelocityAdapt {
            v_ref,
            params: InteractionParams {
                headway_ref: 10.0,
                speed_gain: 1.0,
                headway_gain: 0.5,
                max_braking: 4.0,
            },
        }
    }

    #[test]
    fn constant_speed_is_zero() {
        let u = policy_accel(
            &PolicyKind::ConstantSpeed,
            VehicleState::new(3.0, 7.0),
            VehicleState::new(50.0, 0.0),
            &env(),
        );
        assert_eq!(u.accel, 0.0);
    }

    #[test]
    fn velocity_track_proportional() {
        // k_v = 0.6, error = 2 -> 1.2, inside the box.
        let u = policy_accel(
            &PolicyKind::VelocityTrack { v_ref: 12.0 },
            VehicleState::new(0.0, 10.0),
            VehicleState::new(100.0, 10.0),
            &env(),
        );
        assert!((u.accel - 1.2).abs() < 1e-12);
    }

    #[test]
    fn velocity_adapt_brakes_hard_when_squeezed() {
        // Follow term: 0.5*(5 - 10) + 1.0*(10 - 15) = -7.5, clamped to -4.
        let kind = adapt(15.0);
        let hv = VehicleState::new(0.0, 15.0);
        let av = VehicleState::new(5.0, 10.0);
        let u = policy_accel(&kind, hv, av, &env());
        assert_eq!(u.accel, -4.0);
    }

    #[test]
    fn velocity_adapt_ignores_av_behind() {
        let kind = adapt(15.0);
        let hv = VehicleState::new(20.0, 12.0);
        let av = VehicleState::new(5.0, 30.0);
        let u = policy_accel(&kind, hv, av, &env());
        // Pure tracking: 1.0 * (15 - 12) = 3, at the acceleration ceiling.
        assert_eq!(u.accel, 3.0);
    }

    #[test]
    fn velocity_adapt_tracks_when_gap_generous() {
        // Follow term large positive -> min() picks the tracking term.
        let kind = adapt(12.0);
        let hv = VehicleState::new(0.0, 12.0);
        let av = VehicleState::new(200.0, 12.0);
        let u = policy_accel(&kind, hv, av, &env());
        assert_eq!(u.accel, 0.0);
    }

    #[test]
    fn stop_policy_brakes_to_line_and_holds() {
        let kind = PolicyKind::Stop { stop_line: 50.0 };
        let moving = policy_accel(&kind, VehicleState::new(45.0, 8.0), VehicleState::new(0.0, 0.0), &env());
        // 0.2*(50-45) - 0.6*8 = 1 - 4.8 = -3.8
        assert!((moving.accel + 3.8).abs() < 1e-12);

        let parked = policy_accel(&kind, VehicleState::new(50.0, 0.0), VehicleState::new(0.0, 0.0), &env());
        assert_eq!(parked.accel, 0.0);

        // Far before the line the brake term is positive and is cut to zero:
        // the stop policy never accelerates.
        let far = policy_accel(&kind, VehicleState::new(0.0, 2.0), VehicleState::new(0.0, 0.0), &env());
        assert!(far.accel <= 0.0);
    }

    #[test]
    fn cross_matches_velocity_track() {
        let hv = VehicleState::new(10.0, 9.0);
        let av = VehicleState::new(40.0, 11.0);
        let a = policy_accel(&PolicyKind::Cross { v_ref: 13.0 }, hv, av, &env());
        let b = policy_accel(&PolicyKind::VelocityTrack { v_ref: 13.0 }, hv, av, &env());
        assert_eq!(a.accel, b.accel);
    }

    #[test]
    fn hv_input_switches_at_branching_position() {
        let before = PolicyKind::ConstantSpeed;
        let after = PolicyKind::VelocityTrack { v_ref: 0.0 };
        let av = VehicleState::new(0.0, 0.0);
        let ctx = env();
        let pre = hv_input(VehicleState::new(49.9, 10.0), av, 50.0, &before, &after, &ctx);
        assert_eq!(pre.accel, 0.0);
        // Boundary belongs to the post-decision regime.
        let at = hv_input(VehicleState::new(50.0, 10.0), av, 50.0, &before, &after, &ctx);
        assert!((at.accel + 4.0).abs() < 1e-12); // 0.6*(0-10) = -6, clamped
    }

    #[test]
    fn predicted_braking_of_uniform_ramp() {
        // 15 -> 5 m/s over 5 s at a fixed rate: 2 m/s^2.
        let dt = 0.5;
        let states: Vec<VehicleState> = (0..=10)
            .map(|k| VehicleState::new(0.0, 15.0 - k as f64))
            .collect();
        assert!((predicted_hv_braking(&states, dt) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn predicted_braking_ignores_speedups() {
        let states = vec![VehicleState::new(0.0, 5.0), VehicleState::new(1.0, 7.0)];
        assert_eq!(predicted_hv_braking(&states, 0.2), 0.0);
        assert_eq!(predicted_hv_braking(&states[..1], 0.2), 0.0);
    }

    proptest! {
        #[test]
        fn accel_always_inside_box(
            hv_pos in -100.0f64..300.0,
            hv_vel in 0.0f64..40.0,
            av_pos in -100.0f64..300.0,
            av_vel in 0.0f64..40.0,
            v_ref in 0.0f64..30.0,
            stop_line in -50.0f64..200.0,
        ) {
            let ctx = env();
            let hv = VehicleState::new(hv_pos, hv_vel);
            let av = VehicleState::new(av_pos, av_vel);
            for kind in [
                PolicyKind::ConstantSpeed,
                PolicyKind::VelocityTrack { v_ref },
                adapt(v_ref),
                PolicyKind::Stop { stop_line },
                PolicyKind::Cross { v_ref },
            ] {
                let limit_lo = match &kind {
                    PolicyKind::VelocityAdapt { params, .. } => -params.max_braking,
                    _ => -ctx.default_gains.max_braking,
                };
                let u = policy_accel(&kind, hv, av, &ctx).accel;
                prop_assert!(u >= limit_lo - 1e-12 && u <= ctx.accel_limit + 1e-12);
            }
        }

        #[test]
        fn follow_regime_monotone_in_gap(
            hv_vel in 0.0f64..20.0,
            av_vel in 0.0f64..20.0,
            gap_a in 1.0f64..80.0,
            gap_b in 1.0f64..80.0,
        ) {
            // With everything else fixed, a larger gap to the AV never
            // commands harder braking.
            let kind = adapt(25.0);
            let ctx = env();
            let hv = VehicleState::new(0.0, hv_vel);
            let (small, large) = if gap_a <= gap_b { (gap_a, gap_b) } else { (gap_b, gap_a) };
            let u_small = policy_accel(&kind, hv, VehicleState::new(small, av_vel), &ctx).accel;
            let u_large = policy_accel(&kind, hv, VehicleState::new(large, av_vel), &ctx).accel;
            prop_assert!(u_large >= u_small - 1e-12);
        }

        #[test]
        fn non_interactive_policies_ignore_av(
            hv_pos in -50.0f64..150.0,
            hv_vel in 0.0f64..30.0,
            av_pos in -50.0f64..150.0,
            av_vel in 0.0f64..30.0,
        ) {
            let ctx = env();
            let hv = VehicleState::new(hv_pos, hv_vel);
            let near = VehicleState::new(av_pos, av_vel);
            let far = VehicleState::new(-1e6, 0.0);
            for kind in [
                PolicyKind::ConstantSpeed,
                PolicyKind::VelocityTrack { v_ref: 11.0 },
                PolicyKind::Stop { stop_line: 60.0 },
                PolicyKind::Cross { v_ref: 11.0 },
            ] {
                let a = policy_accel(&kind, hv, near, &ctx).accel;
                let b = policy_accel(&kind, hv, far, &ctx).accel;
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn expansion_matches_finite_differences(
            hv_pos in -20.0f64..120.0,
            hv_vel in 0.5f64..25.0,
            av_pos in -20.0f64..120.0,
            av_vel in 0.5f64..25.0,
        ) {
            let ctx = env();
            let h = 1e-6;
            let hv = VehicleState::new(hv_pos, hv_vel);
            let av = VehicleState::new(av_pos, av_vel);
            for kind in [adapt(14.0), PolicyKind::Stop { stop_line: 60.0 }, PolicyKind::VelocityTrack { v_ref: 9.0 }] {
                let exp = policy_accel_expansion(&kind, hv, av, &ctx);
                // Skip draws that straddle a clamp or regime boundary: the
                // derivative there is one-sided by convention.
                let probe = |hp: f64, hvel: f64, ap: f64, avel: f64| {
                    policy_accel_expansion(&kind, VehicleState::new(hp, hvel), VehicleState::new(ap, avel), &ctx)
                };
                let active = |e: &PolicyExpansion| {
                    (e.d_hv_pos, e.d_hv_vel, e.d_av_pos, e.d_av_vel)
                };
                let up = probe(hv_pos + h, hv_vel, av_pos, av_vel);
                let dn = probe(hv_pos - h, hv_vel, av_pos, av_vel);
                if active(&up) == active(&dn) && active(&up) == active(&exp) {
                    prop_assert!((exp.d_hv_pos - (up.accel - dn.accel) / (2.0 * h)).abs() < 1e-5);
                }
                let up = probe(hv_pos, hv_vel + h, av_pos, av_vel);
                let dn = probe(hv_pos, hv_vel - h, av_pos, av_vel);
                if active(&up) == active(&dn) && active(&up) == active(&exp) {
                    prop_assert!((exp.d_hv_vel - (up.accel - dn.accel) / (2.0 * h)).abs() < 1e-5);
                }
            }
        }
    }
}
