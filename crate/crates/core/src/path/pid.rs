use serde::{Deserialize, Serialize};

use super::geometry::TrackingError;
use crate::error::{DriftError, Result};

/// Look-ahead PID gains and limits. Gains are in curvature (1/m) per metre of
/// look-ahead error, per metre-second of its integral and per m/s of its rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PidConfig {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub x_la: f64,
    /// Bound on the integral contribution `|ki * integral|` (1/m).
    pub integral_limit: f64,
    /// Bound on `|delta_k|` (1/m).
    pub output_limit: f64,
}

impl Default for PidConfig {
    fn default() -> Self {
        Self {
            kp: 0.0005,
            ki: 0.00005,
            kd: 0.0,
            x_la: 30.0,
            integral_limit: 0.02,
            output_limit: 0.015,
        }
    }
}

impl PidConfig {
    pub fn validate(&self) -> Result<()> {
        let gains_ok = [self.kp, self.ki, self.kd]
            .iter()
            .all(|g| g.is_finite() && *g >= 0.0);
        if gains_ok && self.x_la > 0.0 && self.integral_limit > 0.0 && self.output_limit > 0.0 {
            Ok(())
        } else {
            Err(DriftError::InvalidConfig(format!(
                "invalid PID configuration {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidOutput {
    pub e_la: f64,
    pub delta_k: f64,
    pub k_eq: f64,
}

/// Stateful look-ahead curvature correction. A positive look-ahead error
/// (vehicle left of the path) lowers the commanded curvature.
#[derive(Debug, Clone, PartialEq)]
pub struct LookaheadPid {
    pub cfg: PidConfig,
    integral: f64,
    prev_e_la: Option<f64>,
}

impl LookaheadPid {
    pub fn new(cfg: PidConfig) -> Self {
        Self {
            cfg,
            integral: 0.0,
            prev_e_la: None,
        }
    }

    pub fn reset(&mut self) {
        self.integral = 0.0;
        self.prev_e_la = None;
    }

    pub fn integral(&self) -> f64 {
        self.integral
    }

    pub fn look_ahead_error(&self, err: &TrackingError) -> f64 {
        err.e + self.cfg.x_la * err.delta_phi.sin()
    }

    pub fn step(&mut self, err: &TrackingError, dt: f64) -> PidOutput {
        let c = self.cfg;
        let e_la = self.look_ahead_error(err);
        self.integral += e_la * dt;
        if c.ki > 0.0 {
            let bound = c.integral_limit / c.ki;
            self.integral = self.integral.clamp(-bound, bound);
        }
        let rate = self.prev_e_la.map_or(0.0, |p| (e_la - p) / dt);
        self.prev_e_la = Some(e_la);
        let delta_k = (-(c.kp * e_la + c.ki * self.integral + c.kd * rate))
            .clamp(-c.output_limit, c.output_limit);
        PidOutput {
            e_la,
            delta_k,
            k_eq: err.k_p + delta_k,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err(e: f64, dphi: f64) -> TrackingError {
        TrackingError {
            e,
            delta_phi: dphi,
            s_proj: 0.0,
            k_p: 0.05,
        }
    }

    #[test]
    fn zero_error_is_feedforward() {
        let mut pid = LookaheadPid::new(PidConfig::default());
        let out = pid.step(&err(0.0, 0.0), 0.1);
        assert_eq!(out.e_la, 0.0);
        assert_eq!(out.k_eq, 0.05);
    }

    #[test]
    fn look_ahead_error_from_heading() {
        let mut pid = LookaheadPid::new(PidConfig::default());
        let out = pid.step(&err(0.0, 0.1), 0.1);
        assert!((out.e_la - 30.0 * 0.1f64.sin()).abs() < 1e-15);
        assert!(out.delta_k < 0.0);
    }

    #[test]
    fn output_and_integral_stay_bounded() {
        let cfg = PidConfig::default();
        let mut pid = LookaheadPid::new(cfg);
        for _ in 0..10_000 {
            let out = pid.step(&err(8.0, 0.5), 0.1);
            assert!(out.delta_k.abs() <= cfg.output_limit);
        }
        assert!((pid.integral() * cfg.ki).abs() <= cfg.integral_limit + 1e-15);
    }
}
