use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::admm::ControllerConfig;
use crate::error::{DriftError, Result};
use crate::gp::{FitOptions, DEFAULT_CAPACITY};
use crate::path::{PathSpec, PidConfig};
use crate::vehicle::{PlantConfig, VehicleParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Nominal model used by the controller.
    pub vehicle: VehicleParams,
    pub plant: PlantConfig,
    pub controller: ControllerConfig,
    pub pid: PidConfig,
    pub path: PathSpec,
    pub laps: usize,
    #[serde(rename = "Ts")]
    pub ts: f64,
    /// Initial speed (m/s); `None` starts at the nominal drift equilibrium
    /// speed of the path's starting curvature.
    pub initial_speed: Option<f64>,
    /// Initial sideslip (rad); `None` starts at the nominal drift
    /// equilibrium sideslip of the path's starting curvature.
    pub initial_sideslip: Option<f64>,
    pub delta_eq: f64,
    pub gp_capacity: usize,
    pub gp_fit: FitOptions,
    pub seed: u64,
    /// Reuse the shifted previous ADMM iterate as the next initial guess.
    pub warm_start: bool,
    /// Sample references along the path ahead of the vehicle instead of
    /// holding the current equilibrium across the horizon.
    pub reference_preview: bool,
    /// A lap taking longer than this counts as failed (s).
    pub max_lap_time: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        let vehicle = VehicleParams::default();
        Self {
            vehicle,
            plant: PlantConfig::perturbed(&vehicle, 1.0),
            controller: ControllerConfig::default(),
            pid: PidConfig::default(),
            path: PathSpec::default(),
            laps: 6,
            ts: 0.1,
            initial_speed: None,
            initial_sideslip: None,
            delta_eq: (-20f64).to_radians(),
            gp_capacity: DEFAULT_CAPACITY,
            gp_fit: FitOptions::default(),
            seed: 0,
            warm_start: true,
            reference_preview: true,
            max_lap_time: 60.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DriftError::InvalidConfig(msg));
        self.vehicle.validate()?;
        self.plant.validate()?;
        self.controller.validate()?;
        self.pid.validate()?;
        if self.laps == 0 {
            return bad("laps must be at least 1".into());
        }
        if !(self.ts > 0.0 && self.ts.is_finite()) {
            return bad(format!("Ts must be positive, got {}", self.ts));
        }
        self.plant.substeps(self.ts)?;
        if self
            .initial_speed
            .is_some_and(|v| !(v > 0.0 && v.is_finite()))
        {
            return bad("initial_speed must be positive".into());
        }
        if self
            .initial_sideslip
            .is_some_and(|b| !(b.abs() < crate::vehicle::MAX_SIDESLIP))
        {
            return bad("initial_sideslip must lie inside the drift envelope".into());
        }
        if !self.delta_eq.is_finite() {
            return bad("delta_eq must be finite".into());
        }
        if self.gp_capacity == 0 {
            return bad("gp_capacity must be positive".into());
        }
        if !(self.max_lap_time > 0.0) {
            return bad("max_lap_time must be positive".into());
        }
        self.path.build()?;
        Ok(())
    }

    pub fn from_json_str(s: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Loads and validates a JSON config; missing fields take their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| DriftError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| DriftError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets the plant friction, keeping the controller's nominal value.
    pub fn with_plant_friction(mut self, mu: f64) -> Self {
        self.plant.params_true.mu_f = mu;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = SimConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(SimConfig::from_json_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg = SimConfig::from_json_str(r#"{"laps": 2, "controller": {"N": 10}}"#).unwrap();
        assert_eq!(cfg.laps, 2);
        assert_eq!(cfg.controller.horizon, 10);
        assert_eq!(cfg.controller.q, [1.0, 1.0, 1.0]);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(SimConfig {
            laps: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SimConfig {
            ts: 0.1005,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SimConfig::from_json_str(r#"{"lapz": 2}"#).is_err());
    }
}
