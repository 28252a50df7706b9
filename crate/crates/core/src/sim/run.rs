//! The closed-loop lap driver.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::SimConfig;
use super::metrics::{compute_metrics, LapMetrics};
use crate::admm::{admm_solve, shift_warm_start, AdmmIterate, BeliefState, Reference};
use crate::error::{DriftError, Result};
use crate::gp::{GpDump, GpModel, OUTPUT_DIM};
use crate::path::{
    project_to_path, solve_equilibrium, ClothoidPath, LookaheadPid, ReferenceGenerator,
    TrackingError,
};
use crate::vehicle::{step_nominal, step_plant, Control, PlantState, State};

/// One control period. Column order of the exported CSV follows field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: f64,
    pub lap: usize,
    pub step: usize,
    #[serde(rename = "X")]
    pub x: f64,
    #[serde(rename = "Y")]
    pub y: f64,
    pub phi: f64,
    #[serde(rename = "V")]
    pub v: f64,
    pub beta: f64,
    pub r: f64,
    pub delta_actual: f64,
    pub delta: f64,
    #[serde(rename = "Fxr")]
    pub fxr: f64,
    #[serde(rename = "V_ref")]
    pub v_ref: f64,
    pub beta_ref: f64,
    pub r_ref: f64,
    pub delta_ref: f64,
    #[serde(rename = "Fxr_ref")]
    pub fxr_ref: f64,
    pub e: f64,
    pub delta_phi: f64,
    pub s_proj: f64,
    pub k_p: f64,
    pub e_la: f64,
    pub k_eq: f64,
    /// Belief mean predicted by the controller for the next step.
    #[serde(rename = "V_pred")]
    pub v_pred: f64,
    pub beta_pred: f64,
    pub r_pred: f64,
    #[serde(rename = "V_next")]
    pub v_next: f64,
    pub beta_next: f64,
    pub r_next: f64,
    #[serde(rename = "V_nom")]
    pub v_nom: f64,
    pub beta_nom: f64,
    pub r_nom: f64,
    #[serde(rename = "gp_mean_V")]
    pub gp_mean_v: f64,
    pub gp_mean_beta: f64,
    pub gp_mean_r: f64,
    #[serde(rename = "gp_std_V")]
    pub gp_std_v: f64,
    pub gp_std_beta: f64,
    pub gp_std_r: f64,
    pub prediction_error: f64,
    pub stage_cost: f64,
    pub admm_iters: usize,
    pub ilqr_iters: usize,
    pub primal_res: f64,
    pub dual_res: f64,
    pub converged: bool,
    pub solve_us: u64,
}

impl TraceRecord {
    pub const COLUMNS: usize = 46;

    pub fn state(&self) -> State {
        State::new(self.v, self.beta, self.r)
    }

    pub fn control(&self) -> Control {
        Control::new(self.delta, self.fxr)
    }

    pub fn next_state(&self) -> State {
        State::new(self.v_next, self.beta_next, self.r_next)
    }

    pub fn reference(&self) -> Reference {
        Reference {
            x_ref: State::new(self.v_ref, self.beta_ref, self.r_ref),
            u_ref: Control::new(self.delta_ref, self.fxr_ref),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimResult {
    pub records: Vec<TraceRecord>,
    pub laps: Vec<LapMetrics>,
    /// GP active during each lap, in lap order.
    pub gp_dumps: Vec<GpDump>,
}

impl SimResult {
    pub fn lap_records(&self, lap: usize) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.lap == lap)
    }
}

/// Vehicle placed on the path at `s = 0` with its course `phi + beta` along
/// the tangent, speed `initial_speed` and yaw rate `V * k_p(0)`.
pub fn initial_plant_state(path: &ClothoidPath, cfg: &SimConfig) -> Result<PlantState> {
    let k0 = path.curvature_at(0.0);
    let eq = if cfg.initial_speed.is_none() || cfg.initial_sideslip.is_none() {
        Some(solve_equilibrium(cfg.delta_eq, 1.0 / k0, &cfg.vehicle, None, cfg.ts)?.x_eq)
    } else {
        None
    };
    let v = cfg.initial_speed.or(eq.map(|x| x.v)).unwrap_or_default();
    let beta = cfg
        .initial_sideslip
        .or(eq.map(|x| x.beta))
        .unwrap_or_default();
    let mut pose = path.pose_at(0.0);
    pose.phi -= beta;
    Ok(PlantState::new(pose, State::new(v, beta, v * k0)))
}

/// Signed arc-length increment from `prev` to `s`, wrapped on closed paths.
fn arc_increment(path: &ClothoidPath, prev: f64, s: f64) -> f64 {
    let d = s - prev;
    if path.is_closed() {
        let l = path.total_length();
        (d + l / 2.0).rem_euclid(l) - l / 2.0
    } else {
        d
    }
}

struct StepOutcome {
    record: TraceRecord,
    next: PlantState,
    warm: AdmmIterate,
}

struct Loop<'a> {
    cfg: &'a SimConfig,
    path: &'a ClothoidPath,
    gp: GpModel,
    refs: ReferenceGenerator,
    pid: LookaheadPid,
    rng: ChaCha8Rng,
}

impl Loop<'_> {
    fn references(
        &mut self,
        err: &TrackingError,
        delta_k: f64,
        speed: f64,
    ) -> Result<Vec<Reference>> {
        let gp = self.gp.is_trained().then_some(&self.gp);
        let step = if self.cfg.reference_preview {
            speed * self.cfg.ts
        } else {
            0.0
        };
        (0..self.cfg.controller.horizon)
            .map(|j| {
                let s = err.s_proj + j as f64 * step;
                let k = delta_k + self.path.curvature_at(s);
                self.refs.make_reference(k, gp)
            })
            .collect()
    }

    fn step(
        &mut self,
        t: f64,
        lap: usize,
        step: usize,
        plant: &PlantState,
        err: &TrackingError,
        warm: Option<&AdmmIterate>,
    ) -> Result<StepOutcome> {
        let cfg = self.cfg;
        plant.state.check_drift_envelope()?;
        let pid = self.pid.step(err, cfg.ts);
        let refs = self.references(err, pid.delta_k, plant.state.v)?;
        let b0 = BeliefState::certain(plant.state);
        let out = admm_solve(
            &b0,
            &refs,
            &self.gp,
            &cfg.vehicle,
            cfg.ts,
            &cfg.controller,
            warm,
        )?;
        let u = out.control;

        let noise: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut self.rng));
        let next = step_plant(plant, &u, &cfg.plant, cfg.ts, noise)?;
        let nominal = step_nominal(&plant.state, &u, &cfg.vehicle, cfg.ts)?;
        let (mean, var) = if self.gp.is_trained() {
            let p = self.gp.predict_residual(&plant.state, &u)?;
            (p.mean, p.var)
        } else {
            ([0.0; OUTPUT_DIM], [0.0; OUTPUT_DIM])
        };
        let predicted = nominal.to_vector() + Vector3::from(mean);
        let prediction_error = (next.state.to_vector() - predicted).norm();
        self.gp
            .record_transition(&plant.state, &u, &next.state, &nominal);

        let r0 = &refs[0];
        let pred = out.beliefs.get(1).map_or(predicted, |b| b.mu.to_vector());
        let d = &out.diagnostics;
        let record = TraceRecord {
            t,
            lap,
            step,
            x: plant.pose.x,
            y: plant.pose.y,
            phi: plant.pose.phi,
            v: plant.state.v,
            beta: plant.state.beta,
            r: plant.state.r,
            delta_actual: plant.delta_actual,
            delta: u.delta,
            fxr: u.fxr,
            v_ref: r0.x_ref.v,
            beta_ref: r0.x_ref.beta,
            r_ref: r0.x_ref.r,
            delta_ref: r0.u_ref.delta,
            fxr_ref: r0.u_ref.fxr,
            e: err.e,
            delta_phi: err.delta_phi,
            s_proj: err.s_proj,
            k_p: err.k_p,
            e_la: pid.e_la,
            k_eq: pid.k_eq,
            v_pred: pred[0],
            beta_pred: pred[1],
            r_pred: pred[2],
            v_next: next.state.v,
            beta_next: next.state.beta,
            r_next: next.state.r,
            v_nom: nominal.v,
            beta_nom: nominal.beta,
            r_nom: nominal.r,
            gp_mean_v: mean[0],
            gp_mean_beta: mean[1],
            gp_mean_r: mean[2],
            gp_std_v: var[0].sqrt(),
            gp_std_beta: var[1].sqrt(),
            gp_std_r: var[2].sqrt(),
            prediction_error,
            stage_cost: super::metrics::tracking_cost(&plant.state, &u, r0, &cfg.controller),
            admm_iters: d.admm_iters,
            ilqr_iters: d.ilqr_iters,
            primal_res: d.primal_res,
            dual_res: d.dual_res,
            converged: d.converged,
            solve_us: d.solve_us,
        };
        Ok(StepOutcome {
            record,
            next,
            warm: shift_warm_start(&out.iterate),
        })
    }
}

/// Runs `cfg.laps` laps. Lap 1 uses the nominal model only; at every lap
/// boundary the GP absorbs the transitions of the finished lap and refits its
/// hyperparameters. A failed lap (off path, state guard, solver or plant
/// error, timeout) is flagged and the next lap restarts from the initial
/// condition.
pub fn run_closed_loop(cfg: &SimConfig) -> Result<SimResult> {
    cfg.validate()?;
    let path = cfg.path.build()?;
    let mut lp = Loop {
        cfg,
        path: &path,
        gp: GpModel::new(cfg.gp_capacity).with_fit_options(cfg.gp_fit),
        refs: ReferenceGenerator::new(cfg.vehicle, cfg.delta_eq, cfg.ts),
        pid: LookaheadPid::new(cfg.pid),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let max_lap_steps = (cfg.max_lap_time / cfg.ts).ceil() as usize;
    let lap_length = path.total_length();

    let mut records: Vec<TraceRecord> = Vec::new();
    let mut laps = Vec::with_capacity(cfg.laps);
    let mut gp_dumps = Vec::with_capacity(cfg.laps);
    let mut plant = initial_plant_state(&path, cfg)?;
    let mut step = 0usize;
    let mut carry: Option<TrackingError> = None;

    for lap in 1..=cfg.laps {
        gp_dumps.push(lp.gp.to_dump());
        let lap_start = records.len();
        let mut warm: Option<AdmmIterate> = None;
        let mut progress = 0.0;
        let mut failure: Option<String> = None;
        let mut prev_s = carry.map(|e| e.s_proj);
        let mut pending = carry.take();

        loop {
            if records.len() - lap_start >= max_lap_steps {
                failure = Some(format!("lap exceeded {} s", cfg.max_lap_time));
                break;
            }
            let err = match pending.take() {
                Some(e) => Ok(e),
                None => project_to_path(&plant.pose, plant.state.beta, &path, prev_s),
            };
            let err = match err {
                Ok(e) => e,
                Err(e) => {
                    failure = Some(e.to_string());
                    break;
                }
            };
            if let Some(prev) = prev_s {
                progress += arc_increment(&path, prev, err.s_proj);
            }
            prev_s = Some(err.s_proj);
            if progress >= lap_length {
                carry = Some(err);
                break;
            }
            let t = step as f64 * cfg.ts;
            match lp.step(t, lap, step, &plant, &err, warm.as_ref()) {
                Ok(out) => {
                    records.push(out.record);
                    plant = out.next;
                    if cfg.warm_start {
                        warm = Some(out.warm);
                    }
                    step += 1;
                }
                Err(e) => {
                    failure = Some(e.to_string());
                    break;
                }
            }
        }

        let mut metrics = compute_metrics(&records[lap_start..], lap, &cfg.controller);
        if let Some(reason) = failure {
            log::info!("lap {lap} failed: {reason}");
            metrics.failed = true;
            metrics.failure = Some(reason);
            plant = initial_plant_state(&path, cfg)?;
            lp.pid.reset();
            carry = None;
        }
        log::info!(
            "lap {lap}: rmse {:.4} m, prediction error {:.5}, {} steps",
            metrics.rmse_lateral,
            metrics.avg_prediction_error,
            metrics.steps
        );
        laps.push(metrics);

        if lap < cfg.laps {
            lp.gp.update(true, &mut lp.rng)?;
            lp.refs.clear();
        }
    }
    Ok(SimResult {
        records,
        laps,
        gp_dumps,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepScenario {
    pub mu: f64,
    pub laps: Vec<LapMetrics>,
    /// Set when the scenario could not run at all.
    pub error: Option<String>,
}

/// Runs one closed loop per plant friction value in parallel. The
/// controller's nominal friction is left unchanged.
pub fn friction_sweep(cfg: &SimConfig, mu_values: &[f64]) -> Result<Vec<SweepScenario>> {
    if mu_values.is_empty() {
        return Err(DriftError::InvalidConfig(
            "friction sweep needs at least one value".into(),
        ));
    }
    Ok(mu_values
        .par_iter()
        .map(
            |&mu| match run_closed_loop(&cfg.clone().with_plant_friction(mu)) {
                Ok(res) => SweepScenario {
                    mu,
                    laps: res.laps,
                    error: None,
                },
                Err(e) => SweepScenario {
                    mu,
                    laps: Vec::new(),
                    error: Some(e.to_string()),
                },
            },
        )
        .collect())
}
