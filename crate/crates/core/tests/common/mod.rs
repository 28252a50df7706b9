//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use drift_core::admm::BoxQp;
use drift_core::gp::GpModel;
use drift_core::ilqr::{OcpDefinition, StageExpansion};
use drift_core::vehicle::{step_nominal, Control, State, VehicleParams};
use drift_core::Result;
use nalgebra::{DMatrix, DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// `x+ = A x + B u`, stage `x'Qx + u'Ru`, terminal `x'Qf x`.
pub struct LinearQuadratic {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub qf: DMatrix<f64>,
    pub n: usize,
}

impl OcpDefinition for LinearQuadratic {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn control_dim(&self) -> usize {
        self.b.ncols()
    }
    fn horizon(&self) -> usize {
        self.n
    }
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, _: usize) -> Result<DVector<f64>> {
        Ok(&self.a * x + &self.b * u)
    }
    fn dynamics_jacobians(
        &self,
        _: &DVector<f64>,
        _: &DVector<f64>,
        _: usize,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((self.a.clone(), self.b.clone()))
    }
    fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>, _: usize) -> f64 {
        (x.transpose() * &self.q * x)[0] + (u.transpose() * &self.r * u)[0]
    }
    fn stage_expansion(&self, x: &DVector<f64>, u: &DVector<f64>, _: usize) -> StageExpansion {
        StageExpansion {
            l_x: &self.q * x * 2.0,
            l_u: &self.r * u * 2.0,
            l_xx: &self.q * 2.0,
            l_ux: DMatrix::zeros(self.b.ncols(), self.a.nrows()),
            l_uu: &self.r * 2.0,
        }
    }
    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        (x.transpose() * &self.qf * x)[0]
    }
    fn terminal_expansion(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        (&self.qf * x * 2.0, &self.qf * 2.0)
    }
}

fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

fn random_spd<R: Rng>(rng: &mut R, n: usize, floor: f64) -> DMatrix<f64> {
    let m = random_matrix(rng, n, n, 1.0);
    &m * m.transpose() + DMatrix::identity(n, n) * floor
}

pub fn controllable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let mut blocks = Vec::new();
    let mut ab = b.clone();
    for _ in 0..n {
        blocks.push(ab.clone());
        ab = a * ab;
    }
    let cols = blocks.iter().map(|m| m.ncols()).sum();
    let mut c = DMatrix::zeros(n, cols);
    let mut j = 0;
    for blk in &blocks {
        c.view_mut((0, j), (n, blk.ncols())).copy_from(blk);
        j += blk.ncols();
    }
    c.svd(false, false)
        .singular_values
        .iter()
        .filter(|s| **s > 1e-8)
        .count()
        == n
}

/// Random controllable instance; redraws until the controllability matrix has full rank.
pub fn random_lqr<R: Rng>(rng: &mut R, n: usize, m: usize, horizon: usize) -> LinearQuadratic {
    loop {
        let a = random_matrix(rng, n, n, 0.6) + DMatrix::identity(n, n) * 0.5;
        let b = random_matrix(rng, n, m, 1.0);
        if !controllable(&a, &b) {
            continue;
        }
        return LinearQuadratic {
            q: random_spd(rng, n, 0.1),
            r: random_spd(rng, m, 0.1),
            qf: random_spd(rng, n, 0.1),
            a,
            b,
            n: horizon,
        };
    }
}

/// Optimal cost `x0' P_0 x0` from the backward Riccati recursion.
pub fn riccati_cost(p: &LinearQuadratic, x0: &DVector<f64>) -> f64 {
    let mut pk = p.qf.clone();
    for _ in 0..p.n {
        let bt_p = p.b.transpose() * &pk;
        let s = &p.r + &bt_p * &p.b;
        let k = s
            .lu()
            .solve(&(&bt_p * &p.a))
            .expect("R + B'PB is invertible");
        pk = &p.q + p.a.transpose() * &pk * (&p.a - &p.b * k);
        pk = (&pk + pk.transpose()) * 0.5;
    }
    (x0.transpose() * pk * x0)[0]
}

/// Dense Hessian and linear term of the control-update QP in the stacked
/// variable `[u_0; ...; u_{N-1}]`, so that the objective equals
/// `1/2 u'Hu + c'u` up to a constant.
pub fn dense_qp(
    w: &[Vector2<f64>],
    lambda: &[Vector2<f64>],
    qp: &BoxQp,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = w.len();
    let dim = 2 * n;
    let mut h = DMatrix::identity(dim, dim) * qp.rho;
    let mut c = DVector::zeros(dim);
    for i in 0..n {
        for j in 0..2 {
            c[2 * i + j] = -lambda[i][j] - qp.rho * w[i][j];
        }
    }
    for i in 0..n.saturating_sub(1) {
        for j in 0..2 {
            // p (u_{i+1} - u_i)^2 contributes 2p [[1, -1], [-1, 1]].
            let (a, b) = (2 * i + j, 2 * (i + 1) + j);
            let p2 = 2.0 * qp.p_diag[j];
            h[(a, a)] += p2;
            h[(b, b)] += p2;
            h[(a, b)] -= p2;
            h[(b, a)] -= p2;
        }
    }
    (h, c)
}

/// Exhaustive active-set oracle: every variable is free, at its lower bound
/// or at its upper bound; the feasible face minimizer with the lowest
/// objective is the global minimizer of the strictly convex QP.
pub fn qp_enumerate(w: &[Vector2<f64>], lambda: &[Vector2<f64>], qp: &BoxQp) -> Vec<Vector2<f64>> {
    let (h, c) = dense_qp(w, lambda, qp);
    let dim = c.len();
    let lo: Vec<f64> = (0..dim).map(|k| qp.lower[k % 2]).collect();
    let hi: Vec<f64> = (0..dim).map(|k| qp.upper[k % 2]).collect();
    let mut best: Option<(f64, DVector<f64>)> = None;
    let combos = 3usize.pow(dim as u32);
    for code in 0..combos {
        let mut state = vec![0u8; dim];
        let mut rest = code;
        for s in state.iter_mut() {
            *s = (rest % 3) as u8;
            rest /= 3;
        }
        let mut u = DVector::zeros(dim);
        let free: Vec<usize> = (0..dim).filter(|&k| state[k] == 0).collect();
        for k in 0..dim {
            match state[k] {
                1 => u[k] = lo[k],
                2 => u[k] = hi[k],
                _ => {}
            }
        }
        if !free.is_empty() {
            let nf = free.len();
            let mut hff = DMatrix::zeros(nf, nf);
            let mut rhs = DVector::zeros(nf);
            for (a, &ka) in free.iter().enumerate() {
                rhs[a] = -c[ka];
                for kb in 0..dim {
                    if state[kb] != 0 {
                        rhs[a] -= h[(ka, kb)] * u[kb];
                    }
                }
                for (b, &kb) in free.iter().enumerate() {
                    hff[(a, b)] = h[(ka, kb)];
                }
            }
            let Some(sol) = hff.cholesky().map(|ch| ch.solve(&rhs)) else {
                continue;
            };
            for (a, &ka) in free.iter().enumerate() {
                u[ka] = sol[a];
            }
            if free
                .iter()
                .any(|&k| u[k] < lo[k] - 1e-12 || u[k] > hi[k] + 1e-12)
            {
                continue;
            }
        }
        let f = 0.5 * (u.transpose() * &h * &u)[0] + c.dot(&u);
        if best.as_ref().is_none_or(|(fb, _)| f < *fb) {
            best = Some((f, u));
        }
    }
    let u = best.expect("the box is nonempty").1;
    (0..w.len())
        .map(|i| Vector2::new(u[2 * i], u[2 * i + 1]))
        .collect()
}

/// Max over entries of the projected-gradient KKT violation, computed from the dense form.
pub fn dense_kkt_residual(
    u: &[Vector2<f64>],
    w: &[Vector2<f64>],
    lambda: &[Vector2<f64>],
    qp: &BoxQp,
) -> f64 {
    let (h, c) = dense_qp(w, lambda, qp);
    let x = DVector::from_iterator(2 * u.len(), u.iter().flat_map(|v| [v[0], v[1]]));
    let g = &h * &x + c;
    let mut res: f64 = 0.0;
    for k in 0..x.len() {
        let (lo, hi) = (qp.lower[k % 2], qp.upper[k % 2]);
        res = res.max((lo - x[k]).max(x[k] - hi).max(0.0));
        // Distance of x from the projection of x - g onto the box.
        let proj = (x[k] - g[k]).clamp(lo, hi);
        res = res.max((x[k] - proj).abs());
    }
    res
}

/// Subset of `capacity` indices whose ascending list of pairwise distances is
/// lexicographically largest, so the minimum distance is maximized first.
pub fn brute_force_spread(points: &[Vec<f64>], lambda: &[f64], capacity: usize) -> Vec<usize> {
    let n = points.len();
    let dist = |i: usize, j: usize| -> f64 {
        points[i]
            .iter()
            .zip(&points[j])
            .zip(lambda)
            .map(|((a, b), l)| (a - b) * (a - b) / l)
            .sum::<f64>()
            .sqrt()
    };
    let mut best: Option<(Vec<f64>, Vec<usize>)> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != capacity {
            continue;
        }
        let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let mut d = Vec::new();
        for a in 0..idx.len() {
            for b in 0..a {
                d.push(dist(idx[a], idx[b]));
            }
        }
        d.sort_by(f64::total_cmp);
        let better = match &best {
            None => true,
            Some((bd, _)) => d.partial_cmp(bd) == Some(std::cmp::Ordering::Greater),
        };
        if better {
            best = Some((d, idx));
        }
    }
    best.map(|b| b.1).unwrap_or_default()
}

/// Central-difference Jacobian of `f` at `z` with per-coordinate steps.
pub fn central_jacobian<F>(f: F, z: &[f64], steps: &[f64]) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let m = f(z).len();
    let mut j = DMatrix::zeros(m, z.len());
    for k in 0..z.len() {
        let mut zp = z.to_vec();
        let mut zm = z.to_vec();
        zp[k] += steps[k];
        zm[k] -= steps[k];
        let (fp, fm) = (f(&zp), f(&zm));
        for i in 0..m {
            j[(i, k)] = (fp[i] - fm[i]) / (2.0 * steps[k]);
        }
    }
    j
}

/// `||analytic - numeric|| / ||numeric||` in the Frobenius norm, with an
/// absolute floor for vanishing Jacobians.
pub fn relative_error(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>, floor: f64) -> f64 {
    (analytic - numeric).norm() / numeric.norm().max(floor)
}

/// Per-coordinate finite-difference steps scaled to the magnitude of `z`.
pub fn fd_steps(z: &[f64]) -> Vec<f64> {
    z.iter().map(|v| 1e-6 * v.abs().max(1.0)).collect()
}

/// Random box QP with `n` stages.
pub fn random_box_qp<R: Rng>(
    rng: &mut R,
    n: usize,
) -> (Vec<Vector2<f64>>, Vec<Vector2<f64>>, BoxQp) {
    let lower = [rng.random_range(-2.0..0.0), rng.random_range(-2.0..0.0)];
    let upper = [
        lower[0] + rng.random_range(0.1..2.0),
        lower[1] + rng.random_range(0.1..2.0),
    ];
    let qp = BoxQp {
        p_diag: [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)],
        rho: rng.random_range(0.1..10.0),
        lower,
        upper,
    };
    let w = (0..n)
        .map(|_| Vector2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
        .collect();
    let l = (0..n)
        .map(|_| Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
        .collect();
    (w, l, qp)
}

/// State and control in the left-hand drift region.
pub fn random_drift_point<R: Rng>(rng: &mut R) -> (State, Control) {
    (
        State::new(
            rng.random_range(8.0..28.0),
            rng.random_range(-1.2..-0.2),
            rng.random_range(0.2..1.2),
        ),
        Control::new(
            rng.random_range(-0.6..0.3),
            rng.random_range(2000.0..14000.0),
        ),
    )
}

/// GP trained on a smooth synthetic residual around drift states.
pub fn trained_gp(seed: u64) -> GpModel {
    let p = VehicleParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1e-3).unwrap();
    let mut gp = GpModel::new(50);
    for _ in 0..120 {
        let (x, u) = random_drift_point(&mut rng);
        let nominal = step_nominal(&x, &u, &p, 0.1).unwrap();
        let next = State::new(
            nominal.v + 0.02 * (0.1 * x.v).sin() + noise.sample(&mut rng),
            nominal.beta - 0.01 * x.beta * u.delta + noise.sample(&mut rng),
            nominal.r + 0.015 * (u.fxr / 1e4 - 1.0) + noise.sample(&mut rng),
        );
        gp.record_transition(&x, &u, &next, &nominal);
    }
    gp.update(true, &mut rng).unwrap();
    gp
}

/// Standalone single-track model: Pacejka lateral forces, static loads,
/// rear drive force along the body axis.
pub struct SingleTrack {
    pub p: VehicleParams,
}

impl SingleTrack {
    fn tire(&self, alpha: f64, fz: f64) -> f64 {
        let p = &self.p;
        -p.mu_f * fz * (p.shape * (p.stiffness * alpha).atan()).sin()
    }

    pub fn slips(&self, v: f64, beta: f64, r: f64, delta: f64) -> (f64, f64) {
        let p = &self.p;
        let vx = v * beta.cos();
        let vy = v * beta.sin();
        (
            ((vy + p.a * r) / vx).atan() - delta,
            ((vy - p.b * r) / vx).atan(),
        )
    }

    pub fn derivative(&self, v: f64, beta: f64, r: f64, delta: f64, fxr: f64) -> [f64; 3] {
        let p = &self.p;
        let l = p.a + p.b;
        let (fzf, fzr) = (p.m * p.g * p.b / l, p.m * p.g * p.a / l);
        let (af, ar) = self.slips(v, beta, r, delta);
        let (fyf, fyr) = (self.tire(af, fzf), self.tire(ar, fzr));
        // Body-frame accelerations rotated into the velocity frame.
        let ax = (fxr - fyf * delta.sin()) / p.m;
        let ay = (fyf * delta.cos() + fyr) / p.m;
        let dv = ax * beta.cos() + ay * beta.sin();
        let dbeta = (ay * beta.cos() - ax * beta.sin()) / v - r;
        let dr = (p.a * fyf * delta.cos() - p.b * fyr) / p.iz;
        [dv, dbeta, dr]
    }

    pub fn peak_slip(&self) -> f64 {
        // Argmax of sin(C atan(B alpha)): C atan(B alpha) = pi / 2.
        (std::f64::consts::FRAC_PI_2 / self.p.shape).tan() / self.p.stiffness
    }
}
