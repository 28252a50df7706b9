//! Iterative LQR over user-supplied dynamics and costs.
//!
//! The solver is dimension-generic: it works on `DVector` states and controls
//! and only uses first-order dynamics derivatives (Gauss-Newton expansion).
//! Regularization is added to `Q_uu` only.

use nalgebra::{DMatrix, DVector};

use crate::error::{DriftError, Result};

/// Quadratic expansion of a stage cost.
#[derive(Debug, Clone)]
pub struct StageExpansion {
    pub l_x: DVector<f64>,
    pub l_u: DVector<f64>,
    pub l_xx: DMatrix<f64>,
    pub l_ux: DMatrix<f64>,
    pub l_uu: DMatrix<f64>,
}

/// An unconstrained finite-horizon optimal control problem.
pub trait OcpDefinition {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn horizon(&self) -> usize;

    /// Next state; an error marks the candidate as infeasible.
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, step: usize) -> Result<DVector<f64>>;

    /// `(A, B)` = partial derivatives of [`Self::dynamics`].
    fn dynamics_jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        step: usize,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)>;

    fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>, step: usize) -> f64;

    fn stage_expansion(&self, x: &DVector<f64>, u: &DVector<f64>, step: usize) -> StageExpansion;

    fn terminal_cost(&self, x: &DVector<f64>) -> f64;

    /// `(l_x, l_xx)` of the terminal cost.
    fn terminal_expansion(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>);
}

#[derive(Debug, Clone)]
pub struct IlqrConfig {
    pub max_iters: usize,
    pub cost_tol: f64,
    pub reg_init: f64,
    /// Smallest nonzero regularization; increases from zero jump here.
    pub reg_min: f64,
    pub reg_max: f64,
    pub alpha_schedule: Vec<f64>,
    /// Fraction of the predicted decrease a step must achieve.
    pub armijo: f64,
}

impl Default for IlqrConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            cost_tol: 1e-6,
            reg_init: 0.0,
            reg_min: 1e-6,
            reg_max: 1e10,
            alpha_schedule: (0..7).map(|i| 0.5f64.powi(i)).collect(),
            armijo: 1e-4,
        }
    }
}

impl IlqrConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.cost_tol > 0.0
            && self.reg_init >= 0.0
            && self.reg_min > 0.0
            && self.reg_max > self.reg_min
            && !self.alpha_schedule.is_empty()
            && self.alpha_schedule.iter().all(|a| *a > 0.0 && *a <= 1.0);
        if ok {
            Ok(())
        } else {
            Err(DriftError::InvalidConfig(format!(
                "invalid iLQR configuration {self:?}"
            )))
        }
    }

    fn increase(&self, reg: f64) -> f64 {
        (reg * 10.0).max(self.reg_min)
    }

    fn decrease(&self, reg: f64) -> f64 {
        let r = reg / 2.0;
        if r < self.reg_min {
            0.0
        } else {
            r
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub cost: f64,
}

/// Feedforward and feedback terms of one step.
#[derive(Debug, Clone)]
pub struct Gain {
    pub k: DVector<f64>,
    pub big_k: DMatrix<f64>,
}

/// Model decrease `alpha * d1 + alpha^2 / 2 * d2` (both usually negative / positive).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpectedChange {
    pub d1: f64,
    pub d2: f64,
}

impl ExpectedChange {
    /// Predicted cost change for step size `alpha` (negative means decrease).
    pub fn at(&self, alpha: f64) -> f64 {
        alpha * self.d1 + 0.5 * alpha * alpha * self.d2
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationLog {
    pub cost: f64,
    pub reg: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct IlqrSolution {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub cost: f64,
    pub gains: Vec<Gain>,
    pub iterations: usize,
    pub converged: bool,
    pub log: Vec<IterationLog>,
}

/// `Q_uu + reg I` was not positive definite at `step`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndefiniteHessian {
    pub step: usize,
}

/// Per-step derivatives around a nominal trajectory.
pub struct Linearization {
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    stage: Vec<StageExpansion>,
    terminal: (DVector<f64>, DMatrix<f64>),
}

pub fn linearize<P: OcpDefinition + ?Sized>(traj: &Trajectory, ocp: &P) -> Result<Linearization> {
    let n = ocp.horizon();
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let mut stage = Vec::with_capacity(n);
    for i in 0..n {
        let (ai, bi) = ocp.dynamics_jacobians(&traj.states[i], &traj.controls[i], i)?;
        a.push(ai);
        b.push(bi);
        stage.push(ocp.stage_expansion(&traj.states[i], &traj.controls[i], i));
    }
    let terminal = ocp.terminal_expansion(&traj.states[n]);
    Ok(Linearization {
        a,
        b,
        stage,
        terminal,
    })
}

/// Riccati-like sweep producing gains and the expected cost change.
pub fn backward_pass<P: OcpDefinition + ?Sized>(
    traj: &Trajectory,
    ocp: &P,
    reg: f64,
) -> Result<std::result::Result<(Vec<Gain>, ExpectedChange), IndefiniteHessian>> {
    let lin = linearize(traj, ocp)?;
    Ok(backward_pass_linearized(&lin, reg))
}

pub fn backward_pass_linearized(
    lin: &Linearization,
    reg: f64,
) -> std::result::Result<(Vec<Gain>, ExpectedChange), IndefiniteHessian> {
    let n = lin.a.len();
    let (mut v_x, mut v_xx) = lin.terminal.clone();
    let mut gains = Vec::with_capacity(n);
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    for i in (0..n).rev() {
        let (a, b, l) = (&lin.a[i], &lin.b[i], &lin.stage[i]);
        let at = a.transpose();
        let bt = b.transpose();
        let q_x = &l.l_x + &at * &v_x;
        let q_u = &l.l_u + &bt * &v_x;
        let vxx_a = &v_xx * a;
        let q_xx = &l.l_xx + &at * &vxx_a;
        let q_ux = &l.l_ux + &bt * &vxx_a;
        let q_uu = &l.l_uu + &bt * &v_xx * b;

        let mut q_uu_reg = q_uu.clone();
        for d in 0..q_uu_reg.nrows() {
            q_uu_reg[(d, d)] += reg;
        }
        let q_uu_reg = symmetrize(q_uu_reg);
        let chol = q_uu_reg.cholesky().ok_or(IndefiniteHessian { step: i })?;
        let k = -chol.solve(&q_u);
        let big_k = -chol.solve(&q_ux);

        let kt_quu = big_k.transpose() * &q_uu;
        v_x = &q_x + &kt_quu * &k + big_k.transpose() * &q_u + q_ux.transpose() * &k;
        v_xx = symmetrize(
            &q_xx + &kt_quu * &big_k + big_k.transpose() * &q_ux + q_ux.transpose() * &big_k,
        );

        d1 += k.dot(&q_u);
        d2 += (&q_uu * &k).dot(&k);
        gains.push(Gain { k, big_k });
    }
    gains.reverse();
    Ok((gains, ExpectedChange { d1, d2 }))
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Total cost of a state/control sequence.
pub fn trajectory_cost<P: OcpDefinition + ?Sized>(
    ocp: &P,
    states: &[DVector<f64>],
    controls: &[DVector<f64>],
) -> f64 {
    let stages: f64 = controls
        .iter()
        .enumerate()
        .map(|(i, u)| ocp.stage_cost(&states[i], u, i))
        .sum();
    stages + ocp.terminal_cost(&states[controls.len()])
}

/// Open-loop rollout of `controls` from `x0`.
pub fn rollout<P: OcpDefinition + ?Sized>(
    ocp: &P,
    x0: &DVector<f64>,
    controls: &[DVector<f64>],
) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(x0.clone());
    for (i, u) in controls.iter().enumerate() {
        let next = ocp.dynamics(&states[i], u, i)?;
        if !next.iter().all(|v| v.is_finite()) {
            return Err(DriftError::NonFiniteRollout);
        }
        states.push(next);
    }
    let cost = trajectory_cost(ocp, &states, controls);
    if !cost.is_finite() {
        return Err(DriftError::NonFiniteRollout);
    }
    Ok(Trajectory {
        states,
        controls: controls.to_vec(),
        cost,
    })
}

/// Closed-loop rollout `u+ = u + alpha k + K (x+ - x)`. Returns `None` when
/// the candidate leaves the model's domain or produces a non-finite cost.
pub fn forward_pass<P: OcpDefinition + ?Sized>(
    traj: &Trajectory,
    gains: &[Gain],
    alpha: f64,
    ocp: &P,
) -> Option<Trajectory> {
    let n = traj.controls.len();
    let mut states = Vec::with_capacity(n + 1);
    let mut controls = Vec::with_capacity(n);
    states.push(traj.states[0].clone());
    for i in 0..n {
        let dx = &states[i] - &traj.states[i];
        let u = &traj.controls[i] + &gains[i].k * alpha + &gains[i].big_k * dx;
        let next = ocp.dynamics(&states[i], &u, i).ok()?;
        if !next.iter().all(|v| v.is_finite()) {
            return None;
        }
        controls.push(u);
        states.push(next);
    }
    let cost = trajectory_cost(ocp, &states, &controls);
    cost.is_finite().then_some(Trajectory {
        states,
        controls,
        cost,
    })
}

pub fn solve<P: OcpDefinition + ?Sized>(
    ocp: &P,
    x0: &DVector<f64>,
    initial_controls: &[DVector<f64>],
    cfg: &IlqrConfig,
) -> Result<IlqrSolution> {
    if initial_controls.len() != ocp.horizon() {
        return Err(DriftError::InvalidConfig(format!(
            "expected {} initial controls, got {}",
            ocp.horizon(),
            initial_controls.len()
        )));
    }
    let mut traj = rollout(ocp, x0, initial_controls)?;
    let mut reg = cfg.reg_init;
    let mut gains = Vec::new();
    let mut log = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    'outer: while iterations < cfg.max_iters {
        let lin = linearize(&traj, ocp)?;
        let (g, expected) = loop {
            match backward_pass_linearized(&lin, reg) {
                Ok(res) => break res,
                Err(_) => {
                    reg = cfg.increase(reg);
                    if reg > cfg.reg_max {
                        break 'outer;
                    }
                }
            }
        };
        gains = g;
        if -expected.at(1.0) < cfg.cost_tol && expected.d1.abs() < cfg.cost_tol {
            converged = true;
            break;
        }

        let mut accepted = None;
        for &alpha in &cfg.alpha_schedule {
            let Some(cand) = forward_pass(&traj, &gains, alpha, ocp) else {
                continue;
            };
            let actual = traj.cost - cand.cost;
            let predicted = -expected.at(alpha);
            if actual > 0.0 && actual >= cfg.armijo * predicted {
                accepted = Some((cand, alpha, actual));
                break;
            }
        }
        iterations += 1;
        match accepted {
            Some((cand, alpha, decrease)) => {
                traj = cand;
                if alpha == 1.0 {
                    reg = cfg.decrease(reg);
                }
                log.push(IterationLog {
                    cost: traj.cost,
                    reg,
                    alpha,
                });
                if decrease < cfg.cost_tol {
                    converged = true;
                    break;
                }
            }
            None => {
                log.push(IterationLog {
                    cost: traj.cost,
                    reg,
                    alpha: 0.0,
                });
                reg = cfg.increase(reg);
                if reg > cfg.reg_max {
                    break;
                }
            }
        }
    }

    if gains.is_empty() {
        let m = ocp.control_dim();
        let nx = ocp.state_dim();
        gains = (0..ocp.horizon())
            .map(|_| Gain {
                k: DVector::zeros(m),
                big_k: DMatrix::zeros(m, nx),
            })
            .collect();
    }
    Ok(IlqrSolution {
        states: traj.states,
        controls: traj.controls,
        cost: traj.cost,
        gains,
        iterations,
        converged,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// x+ = a x + b u with cost r u^2 + qf x_N^2.
    struct Scalar {
        a: f64,
        b: f64,
        r: f64,
        qf: f64,
    }

    impl OcpDefinition for Scalar {
        fn state_dim(&self) -> usize {
            1
        }
        fn control_dim(&self) -> usize {
            1
        }
        fn horizon(&self) -> usize {
            1
        }
        fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, _: usize) -> Result<DVector<f64>> {
            Ok(DVector::from_element(1, self.a * x[0] + self.b * u[0]))
        }
        fn dynamics_jacobians(
            &self,
            _: &DVector<f64>,
            _: &DVector<f64>,
            _: usize,
        ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
            Ok((
                DMatrix::from_element(1, 1, self.a),
                DMatrix::from_element(1, 1, self.b),
            ))
        }
        fn stage_cost(&self, _: &DVector<f64>, u: &DVector<f64>, _: usize) -> f64 {
            self.r * u[0] * u[0]
        }
        fn stage_expansion(&self, _: &DVector<f64>, u: &DVector<f64>, _: usize) -> StageExpansion {
            StageExpansion {
                l_x: DVector::zeros(1),
                l_u: DVector::from_element(1, 2.0 * self.r * u[0]),
                l_xx: DMatrix::zeros(1, 1),
                l_ux: DMatrix::zeros(1, 1),
                l_uu: DMatrix::from_element(1, 1, 2.0 * self.r),
            }
        }
        fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
            self.qf * x[0] * x[0]
        }
        fn terminal_expansion(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
            (
                DVector::from_element(1, 2.0 * self.qf * x[0]),
                DMatrix::from_element(1, 1, 2.0 * self.qf),
            )
        }
    }

    #[test]
    fn one_step_scalar_gains_by_hand() {
        // min r u^2 + qf (a x0 + b u)^2 around u = 0:
        // Q_u = 2 qf b a x0, Q_uu = 2 r + 2 qf b^2  => k = -qf a b x0 / (r + qf b^2)
        let p = Scalar {
            a: 1.5,
            b: 0.5,
            r: 0.2,
            qf: 3.0,
        };
        let x0 = DVector::from_element(1, 2.0);
        let traj = rollout(&p, &x0, &[DVector::zeros(1)]).unwrap();
        let (gains, _) = backward_pass(&traj, &p, 0.0).unwrap().unwrap();
        let denom = p.r + p.qf * p.b * p.b;
        assert_relative_eq!(
            gains[0].k[0],
            -p.qf * p.a * p.b * 2.0 / denom,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            gains[0].big_k[(0, 0)],
            -p.qf * p.a * p.b / denom,
            epsilon = 1e-12
        );
    }

    #[test]
    fn stationary_nominal_has_zero_feedforward() {
        let p = Scalar {
            a: 0.9,
            b: 1.0,
            r: 1.0,
            qf: 1.0,
        };
        let x0 = DVector::zeros(1);
        let traj = rollout(&p, &x0, &[DVector::zeros(1)]).unwrap();
        let (gains, exp) = backward_pass(&traj, &p, 0.0).unwrap().unwrap();
        assert_eq!(gains[0].k[0], 0.0);
        assert_eq!(exp.at(1.0), 0.0);
        let sol = solve(&p, &x0, &[DVector::zeros(1)], &IlqrConfig::default()).unwrap();
        assert_eq!(sol.iterations, 0);
        assert!(sol.converged);
        assert_eq!(sol.cost, 0.0);
    }

    #[test]
    fn identity_forward_pass() {
        let p = Scalar {
            a: 0.9,
            b: 1.0,
            r: 1.0,
            qf: 1.0,
        };
        let x0 = DVector::from_element(1, 1.0);
        let traj = rollout(&p, &x0, &[DVector::from_element(1, 0.3)]).unwrap();
        let zero = vec![Gain {
            k: DVector::zeros(1),
            big_k: DMatrix::from_element(1, 1, 5.0),
        }];
        let same = forward_pass(&traj, &zero, 0.0, &p).unwrap();
        assert_eq!(same.states, traj.states);
        assert_eq!(same.controls, traj.controls);
    }

    #[test]
    fn rejects_wrong_control_count() {
        let p = Scalar {
            a: 0.9,
            b: 1.0,
            r: 1.0,
            qf: 1.0,
        };
        let x0 = DVector::from_element(1, 1.0);
        assert!(solve(&p, &x0, &[], &IlqrConfig::default()).is_err());
    }

    #[test]
    fn indefinite_quu_is_reported() {
        let p = Scalar {
            a: 1.0,
            b: 1.0,
            r: -5.0,
            qf: 1.0,
        };
        let x0 = DVector::from_element(1, 1.0);
        let traj = rollout(&p, &x0, &[DVector::zeros(1)]).unwrap();
        assert_eq!(
            backward_pass(&traj, &p, 0.0).unwrap().unwrap_err(),
            IndefiniteHessian { step: 0 }
        );
        assert!(backward_pass(&traj, &p, 100.0).unwrap().is_ok());
    }
}
