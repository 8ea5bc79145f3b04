//! Scenario configuration: JSON schema, defaults, and validation.
//!
//! One file describes one scenario end to end: geometry, initial states,
//! the human policy set with its decision model, cost weights, planner
//! constraints, and the time grid. Everything the planner and simulator
//! consume is derived from this struct, so a config hash identifies an
//! experiment.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decision::{DecisionMode, DecisionModelParams};
use crate::dynamics::{TimeGrid, VehicleState};
use crate::planner::{
    ConflictGeometry, ConflictMode, CostWeights, PlannerConstraints, SolverOptions,
};
use crate::policies::{InteractionParams, PolicyEnv, PolicyKind};

/// Which conflict layout the scenario uses.
///
/// `TrafficLight` reuses the merging margin with a stationary virtual
/// vehicle parked `d_safe` past the stop line, so the blocked set is exactly
/// "past the line while the light may be red"; its branching trigger is the
/// AV's own position (visibility), not the virtual vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Merging,
    Intersection,
    TrafficLight,
}

fn default_conflict_len() -> f64 {
    10.0
}
fn default_hv_accel_limit() -> f64 {
    2.0
}
fn default_dt_obs() -> f64 {
    0.6
}
fn default_max_steps() -> usize {
    75
}
fn default_grid() -> TimeGrid {
    TimeGrid { dt: 0.2, horizon_steps: 50, start_time: 0.0 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    /// Path coordinate of the conflict point shared by both agents [m].
    pub s_conflict: f64,
    /// Path coordinate at which the triggering agent's intent branches [m].
    pub s_branch: f64,
    /// Length of the conflict region past `s_conflict` [m]; the occupancy
    /// interval for intersections and the settle distance elsewhere.
    #[serde(default = "default_conflict_len")]
    pub conflict_len: f64,
    pub av_init: VehicleState,
    pub hv_init: VehicleState,
    pub hv_policy_before: PolicyKind,
    pub hv_policies_after: Vec<PolicyKind>,
    /// Default gains for HV policies that do not carry their own.
    pub hv_gains: InteractionParams,
    /// Acceleration ceiling credited to the human [m/s^2].
    #[serde(default = "default_hv_accel_limit")]
    pub hv_accel_limit: f64,
    pub decision: DecisionModelParams,
    #[serde(default)]
    pub weights: CostWeights,
    #[serde(default)]
    pub constraints: PlannerConstraints,
    #[serde(default = "default_grid")]
    pub grid: TimeGrid,
    /// Observation delay after branching before the truth is detectable [s].
    #[serde(default = "default_dt_obs")]
    pub dt_obs: f64,
    /// Closed-loop trial length cap, in steps.
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    /// Contingency planner's nominal child id; default is the first
    /// cross-like child, else child 1.
    #[serde(default)]
    pub nominal_branch: Option<usize>,
    #[serde(default)]
    pub solver: SolverOptions,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.to_string(), message: message.into() }
}

fn require_finite(field: &str, value: f64) -> Result<(), ConfigError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be finite, got {value}")))
    }
}

fn validate_gains(field: &str, gains: &InteractionParams) -> Result<(), ConfigError> {
    for (name, value) in [
        ("headway_ref", gains.headway_ref),
        ("speed_gain", gains.speed_gain),
        ("headway_gain", gains.headway_gain),
        ("max_braking", gains.max_braking),
    ] {
        require_finite(&format!("{field}.{name}"), value)?;
        if value <= 0.0 {
            return Err(invalid(&format!("{field}.{name}"), "must be positive"));
        }
    }
    Ok(())
}

fn validate_policy(field: &str, policy: &PolicyKind) -> Result<(), ConfigError> {
    match policy {
        PolicyKind::ConstantSpeed => Ok(()),
        PolicyKind::VelocityTrack { v_ref } | PolicyKind::Cross { v_ref } => {
            require_finite(&format!("{field}.v_ref"), *v_ref)?;
            if *v_ref < 0.0 {
                return Err(invalid(&format!("{field}.v_ref"), "must be nonnegative"));
            }
            Ok(())
        }
        PolicyKind::VelocityAdapt { v_ref, params } => {
            require_finite(&format!("{field}.v_ref"), *v_ref)?;
            if *v_ref < 0.0 {
                return Err(invalid(&format!("{field}.v_ref"), "must be nonnegative"));
            }
            validate_gains(&format!("{field}.params"), params)
        }
        PolicyKind::Stop { stop_line } => require_finite(&format!("{field}.stop_line"), *stop_line),
    }
}

impl ScenarioConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let config: ScenarioConfig = serde_json::from_str(text)
            .map_err(|source| ConfigError::Parse { path: "<inline>".into(), source })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        require_finite("s_conflict", self.s_conflict)?;
        require_finite("s_branch", self.s_branch)?;
        if self.s_branch <= 0.0 {
            return Err(invalid("s_branch", "must be positive"));
        }
        if self.s_branch >= self.s_conflict {
            return Err(invalid(
                "s_branch",
                format!(
                    "branching position {} must lie before the conflict point {}",
                    self.s_branch, self.s_conflict
                ),
            ));
        }
        require_finite("conflict_len", self.conflict_len)?;
        if self.conflict_len < 0.0 {
            return Err(invalid("conflict_len", "must be nonnegative"));
        }
        for (field, state) in [("av_init", self.av_init), ("hv_init", self.hv_init)] {
            require_finite(&format!("{field}.pos"), state.pos)?;
            require_finite(&format!("{field}.vel"), state.vel)?;
            if state.vel < 0.0 {
                return Err(invalid(&format!("{field}.vel"), "must be nonnegative"));
            }
        }
        validate_policy("hv_policy_before", &self.hv_policy_before)?;
        if self.hv_policies_after.is_empty() {
            return Err(invalid("hv_policies_after", "needs at least one policy"));
        }
        for (i, policy) in self.hv_policies_after.iter().enumerate() {
            validate_policy(&format!("hv_policies_after[{i}]"), policy)?;
            if let PolicyKind::VelocityAdapt { params, .. } = policy {
                if params.max_braking > self.constraints.hv_brake_limit + 1e-9 {
                    return Err(invalid(
                        &format!("hv_policies_after[{i}].max_braking"),
                        "exceeds constraints.hv_brake_limit; plans could never pass the courtesy check",
                    ));
                }
            }
        }
        validate_gains("hv_gains", &self.hv_gains)?;
        if self.hv_gains.max_braking > self.constraints.hv_brake_limit + 1e-9 {
            return Err(invalid(
                "hv_gains.max_braking",
                "exceeds constraints.hv_brake_limit; plans could never pass the courtesy check",
            ));
        }
        require_finite("hv_accel_limit", self.hv_accel_limit)?;
        if self.hv_accel_limit <= 0.0 {
            return Err(invalid("hv_accel_limit", "must be positive"));
        }

        require_finite("decision.slope", self.decision.slope)?;
        require_finite("decision.tta_mid", self.decision.tta_mid)?;
        if self.decision.slope <= 0.0 {
            return Err(invalid("decision.slope", "must be positive"));
        }
        if self.decision.tta_mid <= 0.0 {
            return Err(invalid("decision.tta_mid", "must be positive"));
        }
        match &self.decision.mode {
            DecisionMode::FixedProbabilities { probabilities } => {
                if probabilities.len() != self.hv_policies_after.len() {
                    return Err(invalid(
                        "decision.probabilities",
                        format!(
                            "{} entries for {} policies",
                            probabilities.len(),
                            self.hv_policies_after.len()
                        ),
                    ));
                }
                for (i, &p) in probabilities.iter().enumerate() {
                    if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                        return Err(invalid(
                            &format!("decision.probabilities[{i}]"),
                            format!("must lie in [0, 1], got {p}"),
                        ));
                    }
                }
                let sum: f64 = probabilities.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(invalid(
                        "decision.probabilities",
                        format!("must sum to 1, got {sum}"),
                    ));
                }
            }
            DecisionMode::CrossingFrequency => {
                if self.kind == ScenarioKind::TrafficLight {
                    return Err(invalid(
                        "decision.mode",
                        "a light's state is not a gap-acceptance decision; use fixed_probabilities",
                    ));
                }
                let cross = self.hv_policies_after.iter().filter(|p| p.is_cross_like()).count();
                let stop = self.hv_policies_after.iter().filter(|p| p.is_stop_like()).count();
                if self.hv_policies_after.len() != 2 || cross != 1 || stop != 1 {
                    return Err(invalid(
                        "decision.mode",
                        "crossing_frequency needs exactly one cross policy and one stop policy",
                    ));
                }
            }
        }

        for (field, value) in [
            ("weights.w_track", self.weights.w_track),
            ("weights.w_accel", self.weights.w_accel),
            ("weights.w_accel_rate", self.weights.w_accel_rate),
            ("weights.w_progress", self.weights.w_progress),
        ] {
            require_finite(field, value)?;
            if value < 0.0 {
                return Err(invalid(field, "must be nonnegative"));
            }
        }
        require_finite("weights.v_ref_av", self.weights.v_ref_av)?;
        if self.weights.v_ref_av <= 0.0 {
            return Err(invalid("weights.v_ref_av", "must be positive"));
        }
        require_finite("weights.w_collision", self.weights.w_collision)?;
        if self.weights.w_collision <= 0.0 {
            return Err(invalid("weights.w_collision", "must be positive"));
        }
        require_finite("weights.collision_ramp", self.weights.collision_ramp)?;
        if self.weights.collision_ramp <= 0.0 {
            return Err(invalid("weights.collision_ramp", "must be positive"));
        }
        require_finite("weights.collision_buffer", self.weights.collision_buffer)?;
        if self.weights.collision_buffer < 0.0 {
            return Err(invalid("weights.collision_buffer", "must be nonnegative"));
        }

        let c = &self.constraints;
        for (field, value) in [
            ("constraints.u_min", c.u_min),
            ("constraints.u_max", c.u_max),
            ("constraints.v_min", c.v_min),
            ("constraints.v_max", c.v_max),
            ("constraints.d_safe", c.d_safe),
            ("constraints.hv_brake_limit", c.hv_brake_limit),
        ] {
            require_finite(field, value)?;
        }
        if c.u_min >= c.u_max {
            return Err(invalid("constraints.u_min", "lower input bound must be below the upper"));
        }
        if c.u_min >= 0.0 {
            return Err(invalid("constraints.u_min", "the planner must be allowed to brake"));
        }
        if c.v_min < 0.0 {
            return Err(invalid("constraints.v_min", "must be nonnegative"));
        }
        if c.v_max <= c.v_min {
            return Err(invalid("constraints.v_max", "must exceed v_min"));
        }
        if c.d_safe <= 0.0 {
            return Err(invalid("constraints.d_safe", "must be positive"));
        }
        if c.hv_brake_limit <= 0.0 {
            return Err(invalid("constraints.hv_brake_limit", "must be positive"));
        }

        if !self.grid.dt.is_finite() || self.grid.dt <= 0.0 {
            return Err(invalid("grid.dt", format!("must be positive, got {}", self.grid.dt)));
        }
        if self.grid.horizon_steps == 0 {
            return Err(invalid("grid.horizon_steps", "must cover at least one step"));
        }
        require_finite("dt_obs", self.dt_obs)?;
        if self.dt_obs < 0.0 {
            return Err(invalid("dt_obs", "must be nonnegative"));
        }
        let grid = TimeGrid { dt: self.grid.dt, horizon_steps: self.grid.horizon_steps, start_time: 0.0 };
        if self.dt_obs_steps(&grid) > self.grid.horizon_steps {
            return Err(invalid("dt_obs", "observation window exceeds the horizon"));
        }
        if self.max_steps == 0 {
            return Err(invalid("max_steps", "must be positive"));
        }
        if let Some(id) = self.nominal_branch {
            if id == 0 || id > self.hv_policies_after.len() {
                return Err(invalid(
                    "nominal_branch",
                    format!("must name a child branch 1..={}", self.hv_policies_after.len()),
                ));
            }
        }
        self.solver.validate()?;
        Ok(())
    }

    pub fn time_grid(&self) -> Result<TimeGrid, ConfigError> {
        TimeGrid::new(self.grid.dt, self.grid.horizon_steps)
            .map_err(|e| invalid("grid", e.to_string()))
    }

    /// Observation delay in whole steps on `grid` (rounded to nearest).
    pub fn dt_obs_steps(&self, grid: &TimeGrid) -> usize {
        (self.dt_obs / grid.dt).round() as usize
    }

    pub fn policy_env(&self) -> PolicyEnv {
        PolicyEnv { default_gains: self.hv_gains, accel_limit: self.hv_accel_limit }
    }

    pub fn geometry(&self) -> ConflictGeometry {
        let mode = match self.kind {
            ScenarioKind::Intersection => ConflictMode::Intersection,
            ScenarioKind::Merging | ScenarioKind::TrafficLight => ConflictMode::Merging,
        };
        ConflictGeometry { mode, s_conflict: self.s_conflict, region_len: self.conflict_len }
    }

    /// Contingency's nominal child: configured id, else the first cross-like
    /// child, else child 1.
    pub fn nominal_branch_id(&self) -> usize {
        self.nominal_branch.unwrap_or_else(|| {
            self.hv_policies_after
                .iter()
                .position(|p| p.is_cross_like())
                .map(|i| i + 1)
                .unwrap_or(1)
        })
    }
}

/// Read, parse, and validate a scenario configuration file.
pub fn load_config(path: impl AsRef<Path>) -> Result<ScenarioConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let config: ScenarioConfig = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.display().to_string(),
        source,
    })?;
    config.validate()?;
    Ok(config)
}

/// Bundled scenario files, compiled in so library users and tests share the
/// exact configurations the CLI ships with.
pub mod bundled {
    pub const TRAFFIC_LIGHT: &str = include_str!("../configs/traffic_light.json");
    pub const MERGING: &str = include_str!("../configs/merging.json");
    pub const JUNCTION: &str = include_str!("../configs/junction.json");
    pub const INTERSECTION: &str = include_str!("../configs/intersection.json");
}
