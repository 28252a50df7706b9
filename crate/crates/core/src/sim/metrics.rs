use serde::{Deserialize, Serialize};

use super::run::TraceRecord;
use crate::admm::{ControllerConfig, Reference};
use crate::vehicle::{Control, State};

/// Per-lap summary. Wall-clock time is kept out of the serialized form so
/// that identical runs serialize identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LapMetrics {
    pub lap: usize,
    pub steps: usize,
    pub rmse_lateral: f64,
    pub max_lateral: f64,
    pub avg_cost: f64,
    pub avg_prediction_error: f64,
    pub avg_admm_iters: f64,
    #[serde(skip)]
    pub avg_solve_time_ms: f64,
    #[serde(skip)]
    pub median_solve_time_ms: f64,
    pub failed: bool,
    pub failure: Option<String>,
}

/// `||x - x_ref||_Q^2 + ||u - u_ref||_R^2` in physical units.
pub fn tracking_cost(x: &State, u: &Control, reference: &Reference, cfg: &ControllerConfig) -> f64 {
    let dx = x.to_vector() - reference.x_ref.to_vector();
    let du = u.to_vector() - reference.u_ref.to_vector();
    (0..3).map(|j| cfg.q[j] * dx[j] * dx[j]).sum::<f64>()
        + (0..2).map(|j| cfg.r[j] * du[j] * du[j]).sum::<f64>()
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Metrics over the records of one lap. Empty input yields zeros.
pub fn compute_metrics(records: &[TraceRecord], lap: usize, cfg: &ControllerConfig) -> LapMetrics {
    let n = records.len();
    let mean = |f: &dyn Fn(&TraceRecord) -> f64| {
        if n == 0 {
            0.0
        } else {
            records.iter().map(f).sum::<f64>() / n as f64
        }
    };
    LapMetrics {
        lap,
        steps: n,
        rmse_lateral: mean(&|r| r.e * r.e).sqrt(),
        max_lateral: records.iter().map(|r| r.e.abs()).fold(0.0, f64::max),
        avg_cost: mean(&|r| tracking_cost(&r.state(), &r.control(), &r.reference(), cfg)),
        avg_prediction_error: mean(&|r| r.prediction_error),
        avg_admm_iters: mean(&|r| r.admm_iters as f64),
        avg_solve_time_ms: mean(&|r| r.solve_us as f64 / 1000.0),
        median_solve_time_ms: median(records.iter().map(|r| r.solve_us as f64 / 1000.0).collect()),
        failed: false,
        failure: None,
    }
}

/// Solve-time summary written next to the deterministic metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LapTiming {
    pub lap: usize,
    pub avg_solve_time_ms: f64,
    pub median_solve_time_ms: f64,
}

impl From<&LapMetrics> for LapTiming {
    fn from(m: &LapMetrics) -> Self {
        Self {
            lap: m.lap,
            avg_solve_time_ms: m.avg_solve_time_ms,
            median_solve_time_ms: m.median_solve_time_ms,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(e: f64) -> TraceRecord {
        TraceRecord {
            t: 0.0,
            lap: 1,
            step: 0,
            x: 0.0,
            y: 0.0,
            phi: 0.0,
            v: 16.0,
            beta: -0.9,
            r: 0.8,
            delta_actual: 0.0,
            delta: -0.35,
            fxr: 1e4,
            v_ref: 16.0,
            beta_ref: -0.9,
            r_ref: 0.8,
            delta_ref: -0.35,
            fxr_ref: 1e4,
            e,
            delta_phi: 0.0,
            s_proj: 0.0,
            k_p: 0.05,
            e_la: 0.0,
            k_eq: 0.05,
            v_pred: 0.0,
            beta_pred: 0.0,
            r_pred: 0.0,
            v_next: 0.0,
            beta_next: 0.0,
            r_next: 0.0,
            v_nom: 0.0,
            beta_nom: 0.0,
            r_nom: 0.0,
            gp_mean_v: 0.0,
            gp_mean_beta: 0.0,
            gp_mean_r: 0.0,
            gp_std_v: 0.0,
            gp_std_beta: 0.0,
            gp_std_r: 0.0,
            prediction_error: 0.0,
            stage_cost: 0.0,
            admm_iters: 1,
            ilqr_iters: 1,
            primal_res: 0.0,
            dual_res: 0.0,
            converged: true,
            solve_us: 1000,
        }
    }

    #[test]
    fn constant_error() {
        let recs = vec![record(0.5), record(-0.5), record(0.5)];
        let m = compute_metrics(&recs, 1, &ControllerConfig::default());
        assert!((m.rmse_lateral - 0.5).abs() < 1e-15);
        assert_eq!(m.max_lateral, 0.5);
        assert_eq!(m.avg_cost, 0.0);
        assert_eq!(m.median_solve_time_ms, 1.0);
    }

    #[test]
    fn empty_lap() {
        let m = compute_metrics(&[], 3, &ControllerConfig::default());
        assert_eq!((m.steps, m.rmse_lateral, m.max_lateral), (0, 0.0, 0.0));
    }
}
