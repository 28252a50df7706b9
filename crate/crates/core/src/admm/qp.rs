//! Box-constrained QP of the ADMM control update.
//!
//! minimize  sum_i ||u_{i+1} - u_i||_P^2 + sum_i [lambda_i^T (w_i - u_i) + rho/2 ||w_i - u_i||^2]
//! s.t.      lower <= u_i <= upper
//!
//! With diagonal `P` the Hessian is block-tridiagonal and decouples into one
//! tridiagonal problem per control channel. Each channel is solved by a
//! gradient-projection step with exact line search followed by a projected
//! Newton step on the free variables, repeated until the KKT residual vanishes.

use nalgebra::Vector2;

pub const CONTROL_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxQp {
    pub p_diag: [f64; CONTROL_DIM],
    pub rho: f64,
    pub lower: [f64; CONTROL_DIM],
    pub upper: [f64; CONTROL_DIM],
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: Vec<Vector2<f64>>,
    pub iterations: usize,
    pub kkt_residual: f64,
}

const MAX_ITERS: usize = 200;
const KKT_TOL: f64 = 1e-13;

/// Tridiagonal channel problem `1/2 u^T H u + c^T u`, `H = 2p L + rho I`.
struct Channel<'a> {
    p: f64,
    rho: f64,
    c: &'a [f64],
    lo: f64,
    hi: f64,
}

impl Channel<'_> {
    fn n(&self) -> usize {
        self.c.len()
    }

    fn hess_diag(&self, i: usize) -> f64 {
        let n = self.n();
        let links = if n == 1 {
            0.0
        } else if i == 0 || i == n - 1 {
            1.0
        } else {
            2.0
        };
        self.rho + 2.0 * self.p * links
    }

    fn hess_mul(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n();
        (0..n)
            .map(|i| {
                let mut s = self.hess_diag(i) * v[i];
                if i > 0 {
                    s -= 2.0 * self.p * v[i - 1];
                }
                if i + 1 < n {
                    s -= 2.0 * self.p * v[i + 1];
                }
                s
            })
            .collect()
    }

    fn gradient(&self, u: &[f64]) -> Vec<f64> {
        self.hess_mul(u)
            .iter()
            .zip(self.c)
            .map(|(h, c)| h + c)
            .collect()
    }

    fn objective(&self, u: &[f64]) -> f64 {
        let hu = self.hess_mul(u);
        u.iter()
            .zip(&hu)
            .zip(self.c)
            .map(|((ui, hi), ci)| 0.5 * ui * hi + ci * ui)
            .sum()
    }

    fn project(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    fn kkt_residual(&self, u: &[f64], g: &[f64]) -> f64 {
        u.iter()
            .zip(g)
            .map(|(&ui, &gi)| projected_gradient(ui, gi, self.lo, self.hi).abs())
            .fold(0.0, f64::max)
    }

    /// Solves `H_FF d_F = rhs_F` over the free mask, leaving fixed entries 0.
    fn solve_free(&self, free: &[bool], rhs: &[f64]) -> Vec<f64> {
        let n = self.n();
        let idx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
        let m = idx.len();
        let mut out = vec![0.0; n];
        if m == 0 {
            return out;
        }
        // Thomas algorithm; neighbours in idx couple only if adjacent in the chain.
        let mut diag: Vec<f64> = idx.iter().map(|&i| self.hess_diag(i)).collect();
        let off: Vec<f64> = (1..m)
            .map(|k| {
                if idx[k] == idx[k - 1] + 1 {
                    -2.0 * self.p
                } else {
                    0.0
                }
            })
            .collect();
        let mut r: Vec<f64> = idx.iter().map(|&i| rhs[i]).collect();
        for k in 1..m {
            let w = off[k - 1] / diag[k - 1];
            diag[k] -= w * off[k - 1];
            r[k] -= w * r[k - 1];
        }
        let mut x = vec![0.0; m];
        x[m - 1] = r[m - 1] / diag[m - 1];
        for k in (0..m - 1).rev() {
            x[k] = (r[k] - off[k] * x[k + 1]) / diag[k];
        }
        for (k, &i) in idx.iter().enumerate() {
            out[i] = x[k];
        }
        out
    }

    fn solve(&self, start: Vec<f64>) -> (Vec<f64>, usize, f64) {
        let n = self.n();
        let mut u: Vec<f64> = start.into_iter().map(|v| self.project(v)).collect();
        let mut g = self.gradient(&u);
        let mut iters = 0;
        while iters < MAX_ITERS {
            if self.kkt_residual(&u, &g) < KKT_TOL {
                break;
            }
            iters += 1;

            // Gradient projection with exact line search on the unconstrained quadratic.
            let d: Vec<f64> = (0..n)
                .map(|i| {
                    let pg = projected_gradient(u[i], g[i], self.lo, self.hi);
                    -pg
                })
                .collect();
            let hd = self.hess_mul(&d);
            let dhd: f64 = d.iter().zip(&hd).map(|(a, b)| a * b).sum();
            let gd: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
            if dhd > 0.0 {
                let step = -gd / dhd;
                let cand: Vec<f64> = (0..n).map(|i| self.project(u[i] + step * d[i])).collect();
                if self.objective(&cand) <= self.objective(&u) {
                    u = cand;
                    g = self.gradient(&u);
                }
            }

            // Projected Newton on the variables not held at a bound.
            let free: Vec<bool> = (0..n)
                .map(|i| {
                    let at_lo = u[i] <= self.lo && g[i] > 0.0;
                    let at_hi = u[i] >= self.hi && g[i] < 0.0;
                    !(at_lo || at_hi)
                })
                .collect();
            let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
            let dn = self.solve_free(&free, &neg_g);
            let f0 = self.objective(&u);
            let mut t = 1.0;
            for _ in 0..40 {
                let cand: Vec<f64> = (0..n).map(|i| self.project(u[i] + t * dn[i])).collect();
                let decrease: f64 = (0..n).map(|i| g[i] * (cand[i] - u[i])).sum();
                if self.objective(&cand) <= f0 + 1e-4 * decrease.min(0.0) {
                    u = cand;
                    break;
                }
                t *= 0.5;
            }
            g = self.gradient(&u);
        }
        let res = self.kkt_residual(&u, &g);
        (u, iters, res)
    }
}

fn projected_gradient(u: f64, g: f64, lo: f64, hi: f64) -> f64 {
    if u <= lo {
        g.min(0.0)
    } else if u >= hi {
        g.max(0.0)
    } else {
        g
    }
}

/// Solves the control-update QP given the consensus sequence `w_plus` and multipliers.
pub fn qp_box_solve(w_plus: &[Vector2<f64>], lambda: &[Vector2<f64>], qp: &BoxQp) -> QpSolution {
    assert_eq!(
        w_plus.len(),
        lambda.len(),
        "w and lambda must have equal length"
    );
    let n = w_plus.len();
    let mut u = vec![Vector2::zeros(); n];
    let mut iterations = 0;
    let mut kkt_residual: f64 = 0.0;
    for j in 0..CONTROL_DIM {
        let c: Vec<f64> = (0..n)
            .map(|i| -lambda[i][j] - qp.rho * w_plus[i][j])
            .collect();
        let channel = Channel {
            p: qp.p_diag[j],
            rho: qp.rho,
            c: &c,
            lo: qp.lower[j],
            hi: qp.upper[j],
        };
        // Per-step stationary point with P = 0 as the starting guess.
        let start: Vec<f64> = (0..n)
            .map(|i| w_plus[i][j] + lambda[i][j] / qp.rho)
            .collect();
        let (uj, it, res) = channel.solve(start);
        for i in 0..n {
            u[i][j] = uj[i];
        }
        iterations = iterations.max(it);
        kkt_residual = kkt_residual.max(res);
    }
    QpSolution {
        u,
        iterations,
        kkt_residual,
    }
}

/// QP objective, for diagnostics and tests.
pub fn qp_objective(
    u: &[Vector2<f64>],
    w_plus: &[Vector2<f64>],
    lambda: &[Vector2<f64>],
    qp: &BoxQp,
) -> f64 {
    let mut total = 0.0;
    for i in 0..u.len() {
        if i + 1 < u.len() {
            let d = u[i + 1] - u[i];
            total += qp.p_diag[0] * d[0] * d[0] + qp.p_diag[1] * d[1] * d[1];
        }
        let r = w_plus[i] - u[i];
        total += lambda[i].dot(&r) + 0.5 * qp.rho * r.norm_squared();
    }
    total
}

/// Gradient of [`qp_objective`] with respect to `u`.
pub fn qp_gradient(
    u: &[Vector2<f64>],
    w_plus: &[Vector2<f64>],
    lambda: &[Vector2<f64>],
    qp: &BoxQp,
) -> Vec<Vector2<f64>> {
    let n = u.len();
    (0..n)
        .map(|i| {
            let mut g = -lambda[i] - (w_plus[i] - u[i]) * qp.rho;
            for j in 0..CONTROL_DIM {
                if i > 0 {
                    g[j] += 2.0 * qp.p_diag[j] * (u[i][j] - u[i - 1][j]);
                }
                if i + 1 < n {
                    g[j] += 2.0 * qp.p_diag[j] * (u[i][j] - u[i + 1][j]);
                }
            }
            g
        })
        .collect()
}

/// Largest violation of stationarity/complementarity over all entries.
pub fn qp_kkt_residual(
    u: &[Vector2<f64>],
    w_plus: &[Vector2<f64>],
    lambda: &[Vector2<f64>],
    qp: &BoxQp,
) -> f64 {
    let g = qp_gradient(u, w_plus, lambda, qp);
    let mut res: f64 = 0.0;
    for i in 0..u.len() {
        for j in 0..CONTROL_DIM {
            let v = u[i][j];
            let infeasible = (qp.lower[j] - v).max(v - qp.upper[j]).max(0.0);
            res = res.max(infeasible);
            res = res.max(projected_gradient(v, g[i][j], qp.lower[j], qp.upper[j]).abs());
        }
    }
    res
}
