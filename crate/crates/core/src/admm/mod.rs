//! Drift controller: belief-space tracking OCP split by ADMM into an iLQR
//! sub-problem over consensus controls and a box-constrained smoothing QP.
//!
//! Internally all control sequences are held in scaled units
//! `w = u / control_scale`, so that steering (rad) and drive force (N) have
//! comparable magnitudes; weights are rescaled to match.

pub mod belief;
pub mod qp;

use std::time::Instant;

use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{DriftError, Result};
use crate::gp::GpModel;
use crate::ilqr::{self, IlqrConfig};
use crate::vehicle::{Control, VehicleParams};

pub use belief::{
    belief_stage_cost, propagate_belief, BeliefOcp, BeliefState, Consensus, CostWeights, Reference,
};
pub use qp::{qp_box_solve, qp_kkt_residual, qp_objective, BoxQp, QpSolution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    #[serde(rename = "N")]
    pub horizon: usize,
    #[serde(rename = "Q")]
    pub q: [f64; 3],
    #[serde(rename = "Qf")]
    pub qf: [f64; 3],
    #[serde(rename = "R")]
    pub r: [f64; 2],
    #[serde(rename = "P")]
    pub p: [f64; 2],
    pub u_min: [f64; 2],
    pub u_max: [f64; 2],
    pub rho: f64,
    pub admm_max_iters: usize,
    /// Primal tolerance in scaled control units.
    pub eps_primal: f64,
    /// Dual tolerance in scaled control units.
    pub eps_dual: f64,
    pub control_scale: [f64; 2],
    /// iLQR iteration cap of the first w-update of a solve.
    pub ilqr_first_iters: usize,
    /// iLQR iteration cap of every later w-update.
    pub ilqr_inner_iters: usize,
    /// Cost-decrease tolerance of each w-update.
    pub ilqr_cost_tol: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            q: [1.0, 1.0, 1.0],
            qf: [1.0, 1.0, 1.0],
            r: [1.0, 1e-7],
            p: [10.0, 1e-7],
            u_min: [-0.8, 0.0],
            u_max: [0.8, 15000.0],
            rho: 10.0,
            admm_max_iters: 50,
            eps_primal: 1e-3,
            eps_dual: 1e-3,
            control_scale: [1.0, 1e4],
            ilqr_first_iters: 100,
            ilqr_inner_iters: 10,
            ilqr_cost_tol: 1e-6,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(DriftError::InvalidConfig(format!("controller: {msg}")));
        if self.horizon == 0 {
            return bad("N must be positive");
        }
        let weights = self.q.iter().chain(&self.qf).chain(&self.r).chain(&self.p);
        if weights.clone().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("weights must be finite and non-negative");
        }
        for j in 0..2 {
            if self.u_min[j].is_nan() || self.u_max[j].is_nan() || self.u_min[j] >= self.u_max[j] {
                return bad("u_min must be below u_max componentwise");
            }
            if !(self.control_scale[j] > 0.0 && self.control_scale[j].is_finite()) {
                return bad("control_scale must be positive");
            }
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad("rho must be positive");
        }
        if self.admm_max_iters == 0 || self.ilqr_first_iters == 0 || self.ilqr_inner_iters == 0 {
            return bad("iteration caps must be positive");
        }
        if !(self.eps_primal > 0.0 && self.eps_dual > 0.0 && self.ilqr_cost_tol > 0.0) {
            return bad("tolerances must be positive");
        }
        Ok(())
    }

    pub fn weights(&self) -> CostWeights {
        CostWeights {
            q: self.q,
            qf: self.qf,
            r: self.r,
        }
    }

    /// The u-update QP in scaled units.
    pub fn box_qp(&self) -> BoxQp {
        let s = self.control_scale;
        BoxQp {
            p_diag: [self.p[0] * s[0] * s[0], self.p[1] * s[1] * s[1]],
            rho: self.rho,
            lower: [self.u_min[0] / s[0], self.u_min[1] / s[1]],
            upper: [self.u_max[0] / s[0], self.u_max[1] / s[1]],
        }
    }

    pub fn scale(&self, u: &Control) -> Vector2<f64> {
        Vector2::new(
            u.delta / self.control_scale[0],
            u.fxr / self.control_scale[1],
        )
    }

    pub fn unscale(&self, w: &Vector2<f64>) -> Control {
        Control::new(w[0] * self.control_scale[0], w[1] * self.control_scale[1])
    }

    pub fn clamp(&self, u: &Control) -> Control {
        Control::new(
            u.delta.clamp(self.u_min[0], self.u_max[0]),
            u.fxr.clamp(self.u_min[1], self.u_max[1]),
        )
    }
}

/// ADMM variables in scaled control units.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmIterate {
    pub w: Vec<Vector2<f64>>,
    pub u: Vec<Vector2<f64>>,
    pub lambda: Vec<Vector2<f64>>,
    pub primal_res: f64,
    pub dual_res: f64,
}

impl AdmmIterate {
    /// Cold start: `w = u = clamp(u_ref)`, zero multipliers.
    pub fn cold(refs: &[Reference], cfg: &ControllerConfig) -> Self {
        let u: Vec<Vector2<f64>> = refs
            .iter()
            .map(|r| cfg.scale(&cfg.clamp(&r.u_ref)))
            .collect();
        Self {
            w: u.clone(),
            lambda: vec![Vector2::zeros(); u.len()],
            u,
            primal_res: f64::INFINITY,
            dual_res: f64::INFINITY,
        }
    }

    /// Control sequence `u` in physical units.
    pub fn controls(&self, cfg: &ControllerConfig) -> Vec<Control> {
        self.u.iter().map(|w| cfg.unscale(w)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub admm_iters: usize,
    pub ilqr_iters: usize,
    pub primal_res: f64,
    pub dual_res: f64,
    pub converged: bool,
    /// Cost reported by the final w-update.
    pub cost: f64,
    pub solve_us: u64,
}

#[derive(Debug, Clone)]
pub struct AdmmOutput {
    pub control: Control,
    pub iterate: AdmmIterate,
    pub diagnostics: SolveDiagnostics,
    /// Belief trajectory of the final w-update.
    pub beliefs: Vec<BeliefState>,
}

/// Runs ADMM from `b0` along `refs`, warm-started from `warm` when given.
/// The applied control is the first entry of the bounded sequence `u`.
pub fn admm_solve(
    b0: &BeliefState,
    refs: &[Reference],
    gp: &GpModel,
    params: &VehicleParams,
    ts: f64,
    cfg: &ControllerConfig,
    warm: Option<&AdmmIterate>,
) -> Result<AdmmOutput> {
    let start = Instant::now();
    if refs.len() != cfg.horizon {
        return Err(DriftError::InvalidConfig(format!(
            "expected {} references, got {}",
            cfg.horizon,
            refs.len()
        )));
    }
    let qp = cfg.box_qp();
    let mut it = match warm {
        Some(w) if w.w.len() == cfg.horizon => w.clone(),
        _ => AdmmIterate::cold(refs, cfg),
    };
    let x0 = b0.to_vector();
    let mut ocp = BeliefOcp {
        params,
        gp,
        ts,
        references: refs,
        weights: cfg.weights(),
        control_scale: cfg.control_scale,
        consensus: None,
    };
    let mut ilqr_cfg = IlqrConfig {
        cost_tol: cfg.ilqr_cost_tol,
        ..IlqrConfig::default()
    };
    let mut diag = SolveDiagnostics {
        admm_iters: 0,
        ilqr_iters: 0,
        primal_res: f64::INFINITY,
        dual_res: f64::INFINITY,
        converged: false,
        cost: f64::NAN,
        solve_us: 0,
    };
    let mut beliefs = Vec::new();

    for k in 0..cfg.admm_max_iters {
        // (i) w-update
        ocp.consensus = Some(Consensus {
            u: it.u.clone(),
            lambda: it.lambda.clone(),
            rho: cfg.rho,
        });
        ilqr_cfg.max_iters = if k == 0 {
            cfg.ilqr_first_iters
        } else {
            cfg.ilqr_inner_iters
        };
        let init: Vec<DVector<f64>> =
            it.w.iter()
                .map(|w| DVector::from_column_slice(w.as_slice()))
                .collect();
        let sol = ilqr::solve(&ocp, &x0, &init, &ilqr_cfg)?;
        diag.ilqr_iters += sol.iterations;
        diag.cost = sol.cost;
        it.w = sol
            .controls
            .iter()
            .map(|c| Vector2::new(c[0], c[1]))
            .collect();
        beliefs = sol.states.iter().map(BeliefState::from_vector).collect();

        // (ii) u-update
        let u_prev = std::mem::take(&mut it.u);
        it.u = qp_box_solve(&it.w, &it.lambda, &qp).u;

        // (iii) multiplier ascent
        let mut primal: f64 = 0.0;
        let mut dual: f64 = 0.0;
        for i in 0..cfg.horizon {
            let r = it.w[i] - it.u[i];
            it.lambda[i] += r * cfg.rho;
            primal = primal.max(r.amax());
            dual = dual.max(cfg.rho * (it.u[i] - u_prev[i]).amax());
        }
        it.primal_res = primal;
        it.dual_res = dual;
        diag.admm_iters = k + 1;
        diag.primal_res = primal;
        diag.dual_res = dual;
        if primal < cfg.eps_primal && dual < cfg.eps_dual {
            diag.converged = true;
            break;
        }
    }
    if !diag.converged {
        log::debug!(
            "ADMM stopped after {} iterations (primal {:.2e}, dual {:.2e})",
            diag.admm_iters,
            diag.primal_res,
            diag.dual_res
        );
    }
    let control = cfg.unscale(&it.u[0]);
    diag.solve_us = start.elapsed().as_micros() as u64;
    Ok(AdmmOutput {
        control,
        iterate: it,
        diagnostics: diag,
        beliefs,
    })
}

/// Shifts every sequence one step forward, repeating the last entry.
pub fn shift_warm_start(prev: &AdmmIterate) -> AdmmIterate {
    fn shift(v: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
        match v.split_first() {
            None => Vec::new(),
            Some((_, rest)) => {
                let mut out = rest.to_vec();
                out.push(*v.last().unwrap_or(&Vector2::zeros()));
                out
            }
        }
    }
    AdmmIterate {
        w: shift(&prev.w),
        u: shift(&prev.u),
        lambda: shift(&prev.lambda),
        primal_res: prev.primal_res,
        dual_res: prev.dual_res,
    }
}

/// Plain iLQR on the belief OCP without bounds or smoothing, starting from
/// the references' controls. Returns the first control in physical units.
pub fn unconstrained_ilqr(
    b0: &BeliefState,
    refs: &[Reference],
    gp: &GpModel,
    params: &VehicleParams,
    ts: f64,
    cfg: &ControllerConfig,
    ilqr_cfg: &IlqrConfig,
) -> Result<(Control, ilqr::IlqrSolution)> {
    let ocp = BeliefOcp {
        params,
        gp,
        ts,
        references: refs,
        weights: cfg.weights(),
        control_scale: cfg.control_scale,
        consensus: None,
    };
    let init: Vec<DVector<f64>> = refs
        .iter()
        .map(|r| DVector::from_column_slice(cfg.scale(&r.u_ref).as_slice()))
        .collect();
    let sol = ilqr::solve(&ocp, &b0.to_vector(), &init, ilqr_cfg)?;
    let u0 = ocp.unscale(&sol.controls[0]);
    Ok((u0, sol))
}
