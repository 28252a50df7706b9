//! Single-track drift model with a simplified Pacejka tire, its Euler
//! discretization and analytic Jacobians, plus a higher-fidelity truth plant.
//!
//! States are `(V, beta, r)`: speed magnitude, sideslip and yaw rate.
//! Controls are `(delta, Fxr)`: steering angle and rear longitudinal force.
//! Left turns have positive yaw rate and positive path curvature.

use nalgebra::{Matrix3, Matrix3x2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{DriftError, Result};

/// Sideslip magnitude beyond which the simulator declares a failure.
pub const MAX_SIDESLIP: f64 = 1.4;
/// Speed below which the simulator declares a failure.
pub const MIN_SPEED: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Mass (kg).
    pub m: f64,
    /// Yaw inertia (kg m^2).
    #[serde(rename = "Iz")]
    pub iz: f64,
    /// CG to front axle (m).
    pub a: f64,
    /// CG to rear axle (m).
    pub b: f64,
    /// Tire-road friction coefficient, shared by both axles.
    pub mu_f: f64,
    /// Pacejka stiffness factor.
    #[serde(rename = "B")]
    pub stiffness: f64,
    /// Pacejka shape factor.
    #[serde(rename = "C")]
    pub shape: f64,
    /// Gravitational acceleration (m/s^2).
    pub g: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            m: 1140.0,
            iz: 1020.0,
            a: 1.165,
            b: 1.165,
            mu_f: 1.0,
            stiffness: 12.55,
            shape: 1.494,
            g: 9.81,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("m", self.m),
            ("Iz", self.iz),
            ("a", self.a),
            ("b", self.b),
            ("mu_f", self.mu_f),
            ("B", self.stiffness),
            ("g", self.g),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(DriftError::InvalidParameter(format!(
                    "{name} must be positive, got {value}"
                )));
            }
        }
        if !(self.shape > 1.0 && self.shape < 2.0) {
            return Err(DriftError::InvalidParameter(format!(
                "C must lie in (1, 2), got {}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Static axle loads `(Fzf, Fzr)`; no load transfer.
    pub fn vertical_loads(&self) -> (f64, f64) {
        let weight = self.m * self.g;
        let wheelbase = self.a + self.b;
        (weight * self.b / wheelbase, weight * self.a / wheelbase)
    }

    /// Slip angle at which the lateral force magnitude peaks.
    pub fn peak_slip(&self) -> f64 {
        (std::f64::consts::PI / (2.0 * self.shape)).tan() / self.stiffness
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    #[serde(rename = "V")]
    pub v: f64,
    pub beta: f64,
    pub r: f64,
}

impl State {
    pub const fn new(v: f64, beta: f64, r: f64) -> Self {
        Self { v, beta, r }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.v, self.beta, self.r)
    }

    pub fn from_vector(x: &Vector3<f64>) -> Self {
        Self::new(x[0], x[1], x[2])
    }

    pub fn is_finite(&self) -> bool {
        self.v.is_finite() && self.beta.is_finite() && self.r.is_finite()
    }

    /// Rejects states in which the simulation is considered to have failed.
    pub fn check_drift_envelope(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(DriftError::InvalidState(format!(
                "non-finite state {self:?}"
            )));
        }
        if self.v < MIN_SPEED {
            return Err(DriftError::InvalidState(format!(
                "speed {:.3} m/s below {MIN_SPEED}",
                self.v
            )));
        }
        if self.beta.abs() >= MAX_SIDESLIP {
            return Err(DriftError::InvalidState(format!(
                "sideslip {:.3} rad beyond {MAX_SIDESLIP}",
                self.beta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub delta: f64,
    #[serde(rename = "Fxr")]
    pub fxr: f64,
}

impl Control {
    pub const fn new(delta: f64, fxr: f64) -> Self {
        Self { delta, fxr }
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.delta, self.fxr)
    }

    pub fn from_vector(u: &Vector2<f64>) -> Self {
        Self::new(u[0], u[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TireForces {
    pub fyf: f64,
    pub fyr: f64,
    pub fzf: f64,
    pub fzr: f64,
    pub alpha_f: f64,
    pub alpha_r: f64,
}

pub fn slip_angles(x: &State, u: &Control, p: &VehicleParams) -> Result<(f64, f64)> {
    if !(x.v > 0.0) {
        return Err(DriftError::InvalidState(format!(
            "speed must be positive, got {}",
            x.v
        )));
    }
    let (sb, cb) = x.beta.sin_cos();
    if !(cb > 0.0) {
        return Err(DriftError::InvalidState(format!(
            "sideslip {} outside (-pi/2, pi/2)",
            x.beta
        )));
    }
    let vx = x.v * cb;
    let alpha_f = ((x.v * sb + p.a * x.r) / vx).atan() - u.delta;
    let alpha_r = ((x.v * sb - p.b * x.r) / vx).atan();
    Ok((alpha_f, alpha_r))
}

pub fn lateral_tire_force(alpha: f64, fz: f64, p: &VehicleParams) -> f64 {
    -p.mu_f * fz * (p.shape * (p.stiffness * alpha).atan()).sin()
}

/// Derivative of [`lateral_tire_force`] with respect to the slip angle.
pub fn lateral_tire_force_slope(alpha: f64, fz: f64, p: &VehicleParams) -> f64 {
    let ba = p.stiffness * alpha;
    -p.mu_f * fz * (p.shape * ba.atan()).cos() * p.shape * p.stiffness / (1.0 + ba * ba)
}

pub fn tire_forces(x: &State, u: &Control, p: &VehicleParams) -> Result<TireForces> {
    let (alpha_f, alpha_r) = slip_angles(x, u, p)?;
    let (fzf, fzr) = p.vertical_loads();
    Ok(TireForces {
        fyf: lateral_tire_force(alpha_f, fzf, p),
        fyr: lateral_tire_force(alpha_r, fzr, p),
        fzf,
        fzr,
        alpha_f,
        alpha_r,
    })
}

/// Time derivatives `(dV, dbeta, dr)`.
pub fn continuous_dynamics(x: &State, u: &Control, p: &VehicleParams) -> Result<Vector3<f64>> {
    let t = tire_forces(x, u, p)?;
    let (sb, cb) = x.beta.sin_cos();
    let (sdb, cdb) = (u.delta - x.beta).sin_cos();
    let dv = (-t.fyf * sdb + t.fyr * sb + u.fxr * cb) / p.m;
    let dbeta = (t.fyf * cdb + t.fyr * cb - u.fxr * sb) / (p.m * x.v) - x.r;
    let dr = (p.a * t.fyf * u.delta.cos() - p.b * t.fyr) / p.iz;
    Ok(Vector3::new(dv, dbeta, dr))
}

/// Analytic Jacobians of [`continuous_dynamics`] with respect to state and control.
pub fn continuous_jacobians(
    x: &State,
    u: &Control,
    p: &VehicleParams,
) -> Result<(Matrix3<f64>, Matrix3x2<f64>)> {
    let t = tire_forces(x, u, p)?;
    let (v, beta, r) = (x.v, x.beta, x.r);
    let (sb, cb) = beta.sin_cos();
    let (sdb, cdb) = (u.delta - beta).sin_cos();
    let (sd, cd) = u.delta.sin_cos();
    let sec2 = 1.0 / (cb * cb);

    // Slip-angle partials through p = tan(beta) +/- (axle * r) / (V cos(beta)).
    let pf = (v * sb + p.a * r) / (v * cb);
    let pr = (v * sb - p.b * r) / (v * cb);
    let wf = 1.0 / (1.0 + pf * pf);
    let wr = 1.0 / (1.0 + pr * pr);
    let af_x = Vector3::new(
        -p.a * r / (v * v * cb) * wf,
        (sec2 + p.a * r * sb / (v * cb * cb)) * wf,
        p.a / (v * cb) * wf,
    );
    let ar_x = Vector3::new(
        p.b * r / (v * v * cb) * wr,
        (sec2 - p.b * r * sb / (v * cb * cb)) * wr,
        -p.b / (v * cb) * wr,
    );
    let kf = lateral_tire_force_slope(t.alpha_f, t.fzf, p);
    let kr = lateral_tire_force_slope(t.alpha_r, t.fzr, p);
    let fyf_x = af_x * kf;
    let fyr_x = ar_x * kr;
    let fyf_delta = -kf;

    let num_b = t.fyf * cdb + t.fyr * cb - u.fxr * sb;

    let mut a = Matrix3::zeros();
    let mut b = Matrix3x2::zeros();

    // dV row
    let mut dnum_v = -fyf_x * sdb + fyr_x * sb;
    dnum_v[1] += t.fyf * cdb + t.fyr * cb - u.fxr * sb;
    for j in 0..3 {
        a[(0, j)] = dnum_v[j] / p.m;
    }
    b[(0, 0)] = (-fyf_delta * sdb - t.fyf * cdb) / p.m;
    b[(0, 1)] = cb / p.m;

    // dbeta row
    let mut dnum_b = fyf_x * cdb + fyr_x * cb;
    dnum_b[1] += t.fyf * sdb - t.fyr * sb - u.fxr * cb;
    let mv = p.m * v;
    a[(1, 0)] = dnum_b[0] / mv - num_b / (mv * v);
    a[(1, 1)] = dnum_b[1] / mv;
    a[(1, 2)] = dnum_b[2] / mv - 1.0;
    b[(1, 0)] = (fyf_delta * cdb - t.fyf * sdb) / mv;
    b[(1, 1)] = -sb / mv;

    // dr row
    for j in 0..3 {
        a[(2, j)] = (p.a * fyf_x[j] * cd - p.b * fyr_x[j]) / p.iz;
    }
    b[(2, 0)] = (p.a * fyf_delta * cd - p.a * t.fyf * sd) / p.iz;
    b[(2, 1)] = 0.0;

    Ok((a, b))
}

/// One explicit Euler step of the nominal model.
pub fn step_nominal(x: &State, u: &Control, p: &VehicleParams, ts: f64) -> Result<State> {
    let dx = continuous_dynamics(x, u, p)?;
    Ok(State::from_vector(&(x.to_vector() + dx * ts)))
}

/// Jacobians `(A, B)` of [`step_nominal`].
pub fn jacobians_nominal(
    x: &State,
    u: &Control,
    p: &VehicleParams,
    ts: f64,
) -> Result<(Matrix3<f64>, Matrix3x2<f64>)> {
    let (a, b) = continuous_jacobians(x, u, p)?;
    Ok((Matrix3::identity() + a * ts, b * ts))
}

/// Global planar pose of the vehicle body.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    #[serde(rename = "X")]
    pub x: f64,
    #[serde(rename = "Y")]
    pub y: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Euler,
    #[default]
    Rk4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantConfig {
    pub params_true: VehicleParams,
    pub integrator_step: f64,
    /// First-order steering lag time constant; 0 disables the lag.
    pub actuator_lag_tau: f64,
    /// Per-state standard deviations of the additive process noise.
    pub process_noise_std: [f64; 3],
    pub integrator: Integrator,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self::perturbed(&VehicleParams::default(), 1.0)
    }
}

impl PlantConfig {
    /// Truth plant derived from nominal parameters: friction set to `mu_true`,
    /// B lowered by 5 %, C raised by 3 %, 50 ms steering lag, RK4 at 1 ms.
    pub fn perturbed(nominal: &VehicleParams, mu_true: f64) -> Self {
        let params_true = VehicleParams {
            mu_f: mu_true,
            stiffness: nominal.stiffness * 0.95,
            shape: nominal.shape * 1.03,
            ..*nominal
        };
        Self {
            params_true,
            integrator_step: 1e-3,
            actuator_lag_tau: 0.05,
            process_noise_std: [0.01, 0.002, 0.002],
            integrator: Integrator::Rk4,
        }
    }

    /// A plant identical to the nominal model: no lag, no noise.
    pub fn exact(nominal: &VehicleParams) -> Self {
        Self {
            params_true: *nominal,
            integrator_step: 1e-3,
            actuator_lag_tau: 0.0,
            process_noise_std: [0.0; 3],
            integrator: Integrator::Rk4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params_true.validate()?;
        if !(self.integrator_step > 0.0) {
            return Err(DriftError::InvalidConfig(
                "integrator_step must be positive".into(),
            ));
        }
        if !(self.actuator_lag_tau >= 0.0) {
            return Err(DriftError::InvalidConfig(
                "actuator_lag_tau must be >= 0".into(),
            ));
        }
        if self.process_noise_std.iter().any(|s| !(*s >= 0.0)) {
            return Err(DriftError::InvalidConfig(
                "process_noise_std must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Number of integrator substeps in one control period.
    pub fn substeps(&self, ts: f64) -> Result<usize> {
        let ratio = ts / self.integrator_step;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
            return Err(DriftError::InvalidConfig(format!(
                "integrator step {} does not divide control period {ts}",
                self.integrator_step
            )));
        }
        Ok(n as usize)
    }
}

/// Full plant state: pose, drift states and the realized steering angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub pose: Pose,
    pub state: State,
    /// Steering angle at the wheels after the actuator lag.
    pub delta_actual: f64,
}

impl PlantState {
    pub fn new(pose: Pose, state: State) -> Self {
        Self {
            pose,
            state,
            delta_actual: 0.0,
        }
    }
}

type PlantVector = nalgebra::SVector<f64, 7>;

fn plant_derivative(
    z: &PlantVector,
    delta_cmd: f64,
    fxr: f64,
    cfg: &PlantConfig,
) -> Result<PlantVector> {
    let state = State::new(z[3], z[4], z[5]);
    let delta = if cfg.actuator_lag_tau > 0.0 {
        z[6]
    } else {
        delta_cmd
    };
    let dx = continuous_dynamics(&state, &Control::new(delta, fxr), &cfg.params_true)?;
    let course = z[2] + z[4];
    let ddelta = if cfg.actuator_lag_tau > 0.0 {
        (delta_cmd - z[6]) / cfg.actuator_lag_tau
    } else {
        0.0
    };
    Ok(PlantVector::from_column_slice(&[
        z[3] * course.cos(),
        z[3] * course.sin(),
        z[5],
        dx[0],
        dx[1],
        dx[2],
        ddelta,
    ]))
}

/// Advances the truth plant by one control period.
///
/// `noise` holds standard-normal draws supplied by the caller; they are scaled
/// by `process_noise_std` and added to `(V, beta, r)` at the end of the period.
pub fn step_plant(
    x: &PlantState,
    u_cmd: &Control,
    cfg: &PlantConfig,
    ts: f64,
    noise: [f64; 3],
) -> Result<PlantState> {
    let substeps = cfg.substeps(ts)?;
    let h = ts / substeps as f64;
    let delta0 = if cfg.actuator_lag_tau > 0.0 {
        x.delta_actual
    } else {
        u_cmd.delta
    };
    let mut z = PlantVector::from_column_slice(&[
        x.pose.x,
        x.pose.y,
        x.pose.phi,
        x.state.v,
        x.state.beta,
        x.state.r,
        delta0,
    ]);
    for _ in 0..substeps {
        z = match cfg.integrator {
            Integrator::Euler => z + plant_derivative(&z, u_cmd.delta, u_cmd.fxr, cfg)? * h,
            Integrator::Rk4 => {
                let k1 = plant_derivative(&z, u_cmd.delta, u_cmd.fxr, cfg)?;
                let k2 = plant_derivative(&(z + k1 * (h / 2.0)), u_cmd.delta, u_cmd.fxr, cfg)?;
                let k3 = plant_derivative(&(z + k2 * (h / 2.0)), u_cmd.delta, u_cmd.fxr, cfg)?;
                let k4 = plant_derivative(&(z + k3 * h), u_cmd.delta, u_cmd.fxr, cfg)?;
                z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
            }
        };
    }
    for (i, (w, s)) in noise.iter().zip(cfg.process_noise_std.iter()).enumerate() {
        z[3 + i] += w * s;
    }
    Ok(PlantState {
        pose: Pose {
            x: z[0],
            y: z[1],
            phi: z[2],
        },
        state: State::new(z[3], z[4], z[5]),
        delta_actual: z[6],
    })
}
