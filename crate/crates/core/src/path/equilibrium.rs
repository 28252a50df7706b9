//! Steady drift equilibria and the reference generator built on them.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::admm::Reference;
use crate::error::{DriftError, Result};
use crate::gp::GpModel;
use crate::vehicle::{jacobians_nominal, step_nominal, Control, State, VehicleParams};

pub const EQUILIBRIUM_TOL: f64 = 1e-8;
const BETA_STARTS: [f64; 3] = [-0.3, -0.6, -0.9];
const V_START: f64 = 12.0;
const FXR_START: f64 = 2000.0;
const MAX_NEWTON_ITERS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumPoint {
    pub x_eq: State,
    pub u_eq: Control,
    /// Signed radius, positive for left turns (m).
    pub r_eq: f64,
    pub residual: f64,
}

/// Residual `f(x, u) - x` of the discrete model at `x = (V, beta, V / R)`.
fn residual(
    z: &Vector3<f64>,
    delta: f64,
    k: f64,
    p: &VehicleParams,
    gp: Option<&GpModel>,
    ts: f64,
) -> Result<Vector3<f64>> {
    let x = State::new(z[0], z[1], z[0] * k);
    let u = Control::new(delta, z[2]);
    let mut next = step_nominal(&x, &u, p, ts)?.to_vector();
    if let Some(gp) = gp.filter(|g| g.is_trained()) {
        next += Vector3::from(gp.predict_residual(&x, &u)?.mean);
    }
    Ok(next - x.to_vector())
}

fn residual_jacobian(
    z: &Vector3<f64>,
    delta: f64,
    k: f64,
    p: &VehicleParams,
    gp: Option<&GpModel>,
    ts: f64,
) -> Result<Matrix3<f64>> {
    let x = State::new(z[0], z[1], z[0] * k);
    let u = Control::new(delta, z[2]);
    let (mut a, mut b) = jacobians_nominal(&x, &u, p, ts)?;
    if let Some(gp) = gp.filter(|g| g.is_trained()) {
        let (jm, _) = gp.residual_jacobians(&x, &u)?;
        a += jm.fixed_view::<3, 3>(0, 0);
        b += jm.fixed_view::<3, 2>(0, 3);
    }
    a -= Matrix3::identity();
    let mut j = Matrix3::zeros();
    j.set_column(0, &(a.column(0) + a.column(2) * k));
    j.set_column(1, &a.column(1));
    j.set_column(2, &b.column(1));
    Ok(j)
}

fn newton(
    z0: Vector3<f64>,
    delta: f64,
    k: f64,
    p: &VehicleParams,
    gp: Option<&GpModel>,
    ts: f64,
) -> (Vector3<f64>, f64) {
    let norm =
        |z: &Vector3<f64>| residual(z, delta, k, p, gp, ts).map_or(f64::INFINITY, |r| r.norm());
    let mut z = z0;
    let mut fz = norm(&z);
    for _ in 0..MAX_NEWTON_ITERS {
        if fz < 1e-13 || !fz.is_finite() {
            break;
        }
        let (Ok(f), Ok(j)) = (
            residual(&z, delta, k, p, gp, ts),
            residual_jacobian(&z, delta, k, p, gp, ts),
        ) else {
            break;
        };
        let Some(step) = j.lu().solve(&(-f)) else {
            break;
        };
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let cand = z + step * t;
            let fc = norm(&cand);
            if fc < fz {
                z = cand;
                fz = fc;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    (z, fz)
}

/// Solves `x = f(x, u)` for `(V, beta, F_xr)` with `r = V / R` and the steering
/// fixed at `delta_eq`. Only roots with `|beta|` beyond the rear peak slip
/// (the drift branch) are accepted. When a trained GP is supplied its mean
/// residual is part of `f`. Right-hand turns (`R < 0`) mirror steering and
/// the sideslip guesses.
pub fn solve_equilibrium(
    delta_eq: f64,
    r_eq: f64,
    p: &VehicleParams,
    gp: Option<&GpModel>,
    ts: f64,
) -> Result<EquilibriumPoint> {
    solve_equilibrium_from(delta_eq, r_eq, p, gp, ts, &[], None)
}

/// Root-selection scale over `(V, beta, F_xr)`.
const BRANCH_SCALE: [f64; 3] = [1.0, 0.1, 1000.0];

/// Newton from each of `guesses` and then the default starts. Without an
/// `anchor` the first drift root wins; with one, every start is tried and the
/// drift root closest to the anchor wins.
fn solve_equilibrium_from(
    delta_eq: f64,
    r_eq: f64,
    p: &VehicleParams,
    gp: Option<&GpModel>,
    ts: f64,
    guesses: &[EquilibriumPoint],
    anchor: Option<&EquilibriumPoint>,
) -> Result<EquilibriumPoint> {
    if !(r_eq.is_finite() && r_eq != 0.0) {
        return Err(DriftError::InvalidParameter(format!(
            "equilibrium radius {r_eq} must be finite and nonzero"
        )));
    }
    let sign = r_eq.signum();
    let delta = sign * delta_eq;
    let k = 1.0 / r_eq;
    let peak = p.peak_slip();
    let mut starts: Vec<Vector3<f64>> = guesses
        .iter()
        .map(|g| Vector3::new(g.x_eq.v, g.x_eq.beta, g.u_eq.fxr))
        .collect();
    starts.extend(
        BETA_STARTS
            .iter()
            .map(|b| Vector3::new(V_START, sign * b, FXR_START)),
    );
    let target = anchor.map(|a| Vector3::new(a.x_eq.v, a.x_eq.beta, a.u_eq.fxr));
    let distance = |z: &Vector3<f64>, t: &Vector3<f64>| {
        (0..3)
            .map(|i| ((z[i] - t[i]) / BRANCH_SCALE[i]).powi(2))
            .sum::<f64>()
    };
    let mut best = f64::INFINITY;
    let mut chosen: Option<(Vector3<f64>, f64, f64)> = None;
    for z0 in starts {
        let (z, res) = newton(z0, delta, k, p, gp, ts);
        best = best.min(res);
        if !(res < EQUILIBRIUM_TOL && z[1].abs() > peak && z[0] > 0.0) {
            continue;
        }
        let Some(t) = &target else {
            chosen = Some((z, res, 0.0));
            break;
        };
        let d = distance(&z, t);
        if chosen.is_none_or(|(_, _, dc)| d < dc) {
            chosen = Some((z, res, d));
        }
    }
    let (z, res, _) = chosen.ok_or(DriftError::Equilibrium {
        best_residual: best,
    })?;
    Ok(EquilibriumPoint {
        x_eq: State::new(z[0], z[1], z[0] * k),
        u_eq: Control::new(delta, z[2]),
        r_eq,
        residual: res,
    })
}

/// Equilibrium references with a cache keyed on curvature quantized to
/// `quantum`. Each key is solved at its quantized curvature, so cached and
/// fresh lookups agree exactly.
#[derive(Debug, Clone)]
pub struct ReferenceGenerator {
    pub params: VehicleParams,
    pub delta_eq: f64,
    pub ts: f64,
    pub quantum: f64,
    cache: BTreeMap<i64, EquilibriumPoint>,
    /// Points cached before the last `clear`, used as Newton starts and as
    /// the fallback when a fresh solve fails.
    previous: BTreeMap<i64, EquilibriumPoint>,
    nominal: BTreeMap<i64, EquilibriumPoint>,
}

pub const DEFAULT_CURVATURE_QUANTUM: f64 = 1e-4;

impl ReferenceGenerator {
    pub fn new(params: VehicleParams, delta_eq: f64, ts: f64) -> Self {
        Self {
            params,
            delta_eq,
            ts,
            quantum: DEFAULT_CURVATURE_QUANTUM,
            cache: BTreeMap::new(),
            previous: BTreeMap::new(),
            nominal: BTreeMap::new(),
        }
    }

    /// Invalidates every cached equilibrium, e.g. after the GP changed. The
    /// old points stay available as starting guesses.
    pub fn clear(&mut self) {
        if !self.cache.is_empty() {
            self.previous = std::mem::take(&mut self.cache);
        }
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    fn nearest(map: &BTreeMap<i64, EquilibriumPoint>, key: i64) -> Option<&EquilibriumPoint> {
        let below = map.range(..=key).next_back();
        let above = map.range(key..).next();
        match (below, above) {
            (Some(b), Some(a)) => Some(if key - b.0 <= a.0 - key { b.1 } else { a.1 }),
            (Some(b), None) => Some(b.1),
            (None, Some(a)) => Some(a.1),
            (None, None) => None,
        }
    }

    fn nominal_at(&mut self, key: i64) -> Result<EquilibriumPoint> {
        if let Some(eq) = self.nominal.get(&key) {
            return Ok(*eq);
        }
        if key == 0 {
            return Err(DriftError::InvalidParameter(
                "curvature rounds to zero".into(),
            ));
        }
        let guess: Vec<_> = Self::nearest(&self.nominal, key)
            .copied()
            .into_iter()
            .collect();
        let radius = 1.0 / (key as f64 * self.quantum);
        let eq = solve_equilibrium_from(
            self.delta_eq,
            radius,
            &self.params,
            None,
            self.ts,
            &guess,
            None,
        )?;
        self.nominal.insert(key, eq);
        Ok(eq)
    }

    /// Equilibrium for curvature `k_eq`. With a trained GP the drift root
    /// closest to the nominal equilibrium is taken; when no root is found the
    /// nearest known point, or else the nominal equilibrium, stands in.
    pub fn equilibrium(&mut self, k_eq: f64, gp: Option<&GpModel>) -> Result<EquilibriumPoint> {
        if !k_eq.is_finite() {
            return Err(DriftError::InvalidParameter(format!(
                "curvature {k_eq} is not finite"
            )));
        }
        let key = (k_eq / self.quantum).round() as i64;
        if let Some(eq) = self.cache.get(&key) {
            return Ok(*eq);
        }
        let nominal = match self.nominal_at(key) {
            Ok(eq) => eq,
            Err(e) => {
                return Self::nearest(&self.cache, key)
                    .or_else(|| Self::nearest(&self.nominal, key))
                    .copied()
                    .ok_or(e)
            }
        };
        let Some(gp) = gp.filter(|g| g.is_trained()) else {
            self.cache.insert(key, nominal);
            return Ok(nominal);
        };
        let known = self
            .previous
            .get(&key)
            .or_else(|| Self::nearest(&self.cache, key))
            .copied();
        let guesses: Vec<_> = known.into_iter().chain([nominal]).collect();
        let radius = 1.0 / (key as f64 * self.quantum);
        let eq = match solve_equilibrium_from(
            self.delta_eq,
            radius,
            &self.params,
            Some(gp),
            self.ts,
            &guesses,
            Some(&nominal),
        ) {
            Ok(eq) => eq,
            Err(e) => {
                log::debug!("GP equilibrium at k = {k_eq:.5} failed ({e}); using a fallback point");
                known.unwrap_or(nominal)
            }
        };
        self.cache.insert(key, eq);
        Ok(eq)
    }

    pub fn make_reference(&mut self, k_eq: f64, gp: Option<&GpModel>) -> Result<Reference> {
        let eq = self.equilibrium(k_eq, gp)?;
        Ok(Reference {
            x_ref: eq.x_eq,
            u_ref: eq.u_eq,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drift_equilibrium_at_twenty_metres() {
        let p = VehicleParams::default();
        let eq = solve_equilibrium(-20f64.to_radians(), 20.0, &p, None, 0.1).unwrap();
        assert!(eq.residual < EQUILIBRIUM_TOL);
        assert!((eq.x_eq.v - 16.33).abs() < 0.01, "{eq:?}");
        assert!((eq.x_eq.beta + 0.948).abs() < 0.001);
        assert!((eq.u_eq.fxr - 10733.0).abs() < 5.0);
    }

    #[test]
    fn right_turn_mirrors_left_turn() {
        let p = VehicleParams::default();
        let l = solve_equilibrium(-0.35, 30.0, &p, None, 0.1).unwrap();
        let r = solve_equilibrium(-0.35, -30.0, &p, None, 0.1).unwrap();
        assert!((l.x_eq.v - r.x_eq.v).abs() < 1e-8);
        assert!((l.x_eq.beta + r.x_eq.beta).abs() < 1e-8);
        assert!((l.u_eq.delta + r.u_eq.delta).abs() < 1e-15);
    }

    #[test]
    fn cache_returns_identical_points() {
        let mut g = ReferenceGenerator::new(VehicleParams::default(), -20f64.to_radians(), 0.1);
        let a = g.equilibrium(0.03, None).unwrap();
        let b = g.equilibrium(0.030004, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(g.cache_len(), 1);
        assert!(g.equilibrium(0.0, None).is_ok());
    }

    #[test]
    fn zero_radius_rejected() {
        assert!(solve_equilibrium(-0.35, 0.0, &VehicleParams::default(), None, 0.1).is_err());
    }
}
