//! Gaussian belief propagation and the deterministic belief-space OCP.

use nalgebra::{DMatrix, DVector, Vector2, Vector3};

use crate::error::Result;
use crate::gp::GpModel;
use crate::ilqr::{OcpDefinition, StageExpansion};
use crate::vehicle::{jacobians_nominal, step_nominal, Control, State, VehicleParams};

pub const BELIEF_DIM: usize = 6;

/// Mean state plus diagonal covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeliefState {
    pub mu: State,
    /// Variances of `(V, beta, r)`.
    pub sigma: [f64; 3],
}

impl BeliefState {
    pub fn certain(mu: State) -> Self {
        Self {
            mu,
            sigma: [0.0; 3],
        }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&[
            self.mu.v,
            self.mu.beta,
            self.mu.r,
            self.sigma[0],
            self.sigma[1],
            self.sigma[2],
        ])
    }

    pub fn from_vector(x: &DVector<f64>) -> Self {
        Self {
            mu: State::new(x[0], x[1], x[2]),
            sigma: [x[3], x[4], x[5]],
        }
    }
}

/// Tracking target for one horizon step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub x_ref: State,
    pub u_ref: Control,
}

/// Weights of the belief-space tracking cost (diagonals).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    pub q: [f64; 3],
    pub qf: [f64; 3],
    pub r: [f64; 2],
}

/// One step of the belief dynamics: the mean follows the nominal model plus
/// the GP mean, the variance accumulates the GP variance. An untrained GP adds
/// neither.
pub fn propagate_belief(
    b: &BeliefState,
    u: &Control,
    gp: &GpModel,
    p: &VehicleParams,
    ts: f64,
) -> Result<BeliefState> {
    let nominal = step_nominal(&b.mu, u, p, ts)?;
    if !gp.is_trained() {
        return Ok(BeliefState {
            mu: nominal,
            sigma: b.sigma,
        });
    }
    let pred = gp.predict_residual(&b.mu, u)?;
    Ok(BeliefState {
        mu: State::new(
            nominal.v + pred.mean[0],
            nominal.beta + pred.mean[1],
            nominal.r + pred.mean[2],
        ),
        sigma: [
            b.sigma[0] + pred.var[0],
            b.sigma[1] + pred.var[1],
            b.sigma[2] + pred.var[2],
        ],
    })
}

/// `||mu - x_ref||_Q^2 + tr(Q Sigma) + ||u - u_ref||_R^2` with its expansion
/// over the 6-D belief and the 2-D control.
pub fn belief_stage_cost(
    b: &BeliefState,
    u: &Control,
    reference: &Reference,
    weights: &CostWeights,
) -> (f64, StageExpansion) {
    stage_cost_scaled(
        &b.to_vector(),
        &u.to_vector(),
        reference,
        weights,
        &[1.0, 1.0],
    )
}

/// Stage cost with the control expressed in scaled units `u / scale`.
fn stage_cost_scaled(
    x: &DVector<f64>,
    w: &Vector2<f64>,
    reference: &Reference,
    weights: &CostWeights,
    scale: &[f64; 2],
) -> (f64, StageExpansion) {
    let xr = reference.x_ref.to_vector();
    let ur = [
        reference.u_ref.delta / scale[0],
        reference.u_ref.fxr / scale[1],
    ];
    let mut value = 0.0;
    let mut l_x = DVector::zeros(BELIEF_DIM);
    let mut l_xx = DMatrix::zeros(BELIEF_DIM, BELIEF_DIM);
    for j in 0..3 {
        let e = x[j] - xr[j];
        value += weights.q[j] * e * e + weights.q[j] * x[3 + j];
        l_x[j] = 2.0 * weights.q[j] * e;
        l_x[3 + j] = weights.q[j];
        l_xx[(j, j)] = 2.0 * weights.q[j];
    }
    let mut l_u = DVector::zeros(2);
    let mut l_uu = DMatrix::zeros(2, 2);
    for j in 0..2 {
        let r = weights.r[j] * scale[j] * scale[j];
        let e = w[j] - ur[j];
        value += r * e * e;
        l_u[j] = 2.0 * r * e;
        l_uu[(j, j)] = 2.0 * r;
    }
    (
        value,
        StageExpansion {
            l_x,
            l_u,
            l_xx,
            l_ux: DMatrix::zeros(2, BELIEF_DIM),
            l_uu,
        },
    )
}

/// Augmented-Lagrangian terms `lambda^T (w - u) + rho/2 ||w - u||^2` of the
/// consensus sub-problem, in scaled control units.
#[derive(Debug, Clone)]
pub struct Consensus {
    pub u: Vec<Vector2<f64>>,
    pub lambda: Vec<Vector2<f64>>,
    pub rho: f64,
}

/// Belief-space OCP over scaled controls `w = u / control_scale`.
pub struct BeliefOcp<'a> {
    pub params: &'a VehicleParams,
    pub gp: &'a GpModel,
    pub ts: f64,
    pub references: &'a [Reference],
    pub weights: CostWeights,
    pub control_scale: [f64; 2],
    pub consensus: Option<Consensus>,
}

impl BeliefOcp<'_> {
    pub fn unscale(&self, w: &DVector<f64>) -> Control {
        Control::new(w[0] * self.control_scale[0], w[1] * self.control_scale[1])
    }

    pub fn scale(&self, u: &Control) -> DVector<f64> {
        DVector::from_column_slice(&[
            u.delta / self.control_scale[0],
            u.fxr / self.control_scale[1],
        ])
    }

    fn use_gp(&self) -> bool {
        self.gp.is_trained()
    }
}

impl OcpDefinition for BeliefOcp<'_> {
    fn state_dim(&self) -> usize {
        BELIEF_DIM
    }

    fn control_dim(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        self.references.len()
    }

    fn dynamics(&self, x: &DVector<f64>, w: &DVector<f64>, _step: usize) -> Result<DVector<f64>> {
        let b = BeliefState::from_vector(x);
        let next = propagate_belief(&b, &self.unscale(w), self.gp, self.params, self.ts)?;
        Ok(next.to_vector())
    }

    fn dynamics_jacobians(
        &self,
        x: &DVector<f64>,
        w: &DVector<f64>,
        _step: usize,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let b = BeliefState::from_vector(x);
        let u = self.unscale(w);
        let (an, bn) = jacobians_nominal(&b.mu, &u, self.params, self.ts)?;
        let mut a = DMatrix::zeros(BELIEF_DIM, BELIEF_DIM);
        let mut bm = DMatrix::zeros(BELIEF_DIM, 2);
        for i in 0..3 {
            for j in 0..3 {
                a[(i, j)] = an[(i, j)];
            }
            a[(3 + i, 3 + i)] = 1.0;
            for j in 0..2 {
                bm[(i, j)] = bn[(i, j)];
            }
        }
        if self.use_gp() {
            let (jm, jv) = self.gp.residual_jacobians(&b.mu, &u)?;
            for i in 0..3 {
                for j in 0..3 {
                    a[(i, j)] += jm[(i, j)];
                    a[(3 + i, j)] = jv[(i, j)];
                }
                for j in 0..2 {
                    bm[(i, j)] += jm[(i, 3 + j)];
                    bm[(3 + i, j)] = jv[(i, 3 + j)];
                }
            }
        }
        for j in 0..2 {
            for i in 0..BELIEF_DIM {
                bm[(i, j)] *= self.control_scale[j];
            }
        }
        Ok((a, bm))
    }

    fn stage_cost(&self, x: &DVector<f64>, w: &DVector<f64>, step: usize) -> f64 {
        self.stage_expansion_with_value(x, w, step).0
    }

    fn stage_expansion(&self, x: &DVector<f64>, w: &DVector<f64>, step: usize) -> StageExpansion {
        self.stage_expansion_with_value(x, w, step).1
    }

    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        self.terminal(x).0
    }

    fn terminal_expansion(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let (_, l_x, l_xx) = self.terminal(x);
        (l_x, l_xx)
    }
}

impl BeliefOcp<'_> {
    fn stage_expansion_with_value(
        &self,
        x: &DVector<f64>,
        w: &DVector<f64>,
        step: usize,
    ) -> (f64, StageExpansion) {
        let wv = Vector2::new(w[0], w[1]);
        let (mut value, mut exp) = stage_cost_scaled(
            x,
            &wv,
            &self.references[step],
            &self.weights,
            &self.control_scale,
        );
        if let Some(c) = &self.consensus {
            let d = wv - c.u[step];
            value += c.lambda[step].dot(&d) + 0.5 * c.rho * d.norm_squared();
            for j in 0..2 {
                exp.l_u[j] += c.lambda[step][j] + c.rho * d[j];
                exp.l_uu[(j, j)] += c.rho;
            }
        }
        (value, exp)
    }

    fn terminal(&self, x: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let xr = self.references[self.references.len() - 1].x_ref.to_vector();
        let q = Vector3::from(self.weights.qf);
        let mut value = 0.0;
        let mut l_x = DVector::zeros(BELIEF_DIM);
        let mut l_xx = DMatrix::zeros(BELIEF_DIM, BELIEF_DIM);
        for j in 0..3 {
            let e = x[j] - xr[j];
            value += q[j] * e * e + q[j] * x[3 + j];
            l_x[j] = 2.0 * q[j] * e;
            l_x[3 + j] = q[j];
            l_xx[(j, j)] = 2.0 * q[j];
        }
        (value, l_x, l_xx)
    }
}
