//! Longitudinal vehicle model shared by both agents.
//!
//! A vehicle is a double integrator along its lane centerline: position and
//! velocity driven by an acceleration input. The discrete step is the exact
//! zero-order-hold solution of the continuous model, so rollouts carry no
//! integration error. Velocity is clamped at zero and the position update is
//! truncated at the stopping time: vehicles halt, they never reverse.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Longitudinal state of one vehicle along its centerline path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Path length along the centerline [m].
    pub pos: f64,
    /// Longitudinal velocity [m/s]; nonnegative by construction.
    pub vel: f64,
}

impl VehicleState {
    pub fn new(pos: f64, vel: f64) -> Self {
        Self { pos, vel }
    }
}

/// Longitudinal acceleration command [m/s^2].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub accel: f64,
}

impl ControlInput {
    pub fn new(accel: f64) -> Self {
        Self { accel }
    }
}

/// Sampling grid shared by prediction, planning and simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    /// Sampling period [s].
    pub dt: f64,
    /// Number of input steps in one plan; states run 0..=horizon_steps.
    pub horizon_steps: usize,
    /// Absolute time of state index 0 [s]; only affects reported timestamps.
    #[serde(default)]
    pub start_time: f64,
}

impl TimeGrid {
    pub fn new(dt: f64, horizon_steps: usize) -> Result<Self, DynamicsError> {
        if !dt.is_finite() || dt <= 0.0 {
            return Err(DynamicsError::InvalidDt(dt));
        }
        if horizon_steps == 0 {
            return Err(DynamicsError::EmptyHorizon);
        }
        Ok(Self { dt, horizon_steps, start_time: 0.0 })
    }

    pub fn horizon_seconds(&self) -> f64 {
        self.dt * self.horizon_steps as f64
    }

    /// Absolute time of state index `step`.
    pub fn time_at(&self, step: usize) -> f64 {
        self.start_time + self.dt * step as f64
    }
}

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("non-finite {quantity}: {value}")]
    NonFinite { quantity: &'static str, value: f64 },
    #[error("sampling period must be positive and finite, got {0}")]
    InvalidDt(f64),
    #[error("horizon must cover at least one step")]
    EmptyHorizon,
    #[error("rollout needs at least one input")]
    EmptyInputs,
}

/// One discrete step plus the partial derivatives of the next state, used by
/// the planner's reverse sweep. Position is always an identity map in itself,
/// so only the velocity/acceleration partials are stored. In the stopped
/// regime the velocity partials vanish, matching the one-sided clamp.
#[derive(Debug, Clone, Copy)]
pub(crate) struct StepExpansion {
    pub next: VehicleState,
    pub dpos_dvel: f64,
    pub dpos_daccel: f64,
    pub dvel_dvel: f64,
    pub dvel_daccel: f64,
}

pub(crate) fn step_expansion(state: VehicleState, accel: f64, dt: f64) -> StepExpansion {
    let vel_next = state.vel + accel * dt;
    if vel_next >= 0.0 {
        StepExpansion {
            next: VehicleState::new(
                state.pos + state.vel * dt + 0.5 * accel * dt * dt,
                vel_next,
            ),
            dpos_dvel: dt,
            dpos_daccel: 0.5 * dt * dt,
            dvel_dvel: 1.0,
            dvel_daccel: dt,
        }
    } else {
        // accel < 0 here: the vehicle comes to rest inside the interval and
        // the position advance is truncated at the stopping time -vel/accel.
        StepExpansion {
            next: VehicleState::new(state.pos - 0.5 * state.vel * state.vel / accel, 0.0),
            dpos_dvel: -state.vel / accel,
            dpos_daccel: 0.5 * state.vel * state.vel / (accel * accel),
            dvel_dvel: 0.0,
            dvel_daccel: 0.0,
        }
    }
}

/// Advance one vehicle by one sampling period under a constant acceleration.
pub fn step(state: VehicleState, input: ControlInput, dt: f64) -> Result<VehicleState, DynamicsError> {
    if !dt.is_finite() || dt <= 0.0 {
        return Err(DynamicsError::InvalidDt(dt));
    }
    for (quantity, value) in [
        ("position", state.pos),
        ("velocity", state.vel),
        ("acceleration", input.accel),
    ] {
        if !value.is_finite() {
            return Err(DynamicsError::NonFinite { quantity, value });
        }
    }
    debug_assert!(state.vel >= 0.0, "vehicle velocity must be nonnegative");
    Ok(step_expansion(state, input.accel, dt).next)
}

/// Roll a state forward under an input sequence. The output starts at
/// `initial` and has one more element than `inputs`.
pub fn rollout(
    initial: VehicleState,
    inputs: &[ControlInput],
    dt: f64,
) -> Result<Vec<VehicleState>, DynamicsError> {
    if inputs.is_empty() {
        return Err(DynamicsError::EmptyInputs);
    }
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(initial);
    for input in inputs {
        let next = step(*states.last().unwrap(), *input, dt)?;
        states.push(next);
    }
    Ok(states)
}
