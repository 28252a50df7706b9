mod common;

use common::{central_jacobian, fd_steps as steps, random_drift_point, relative_error, trained_gp};
use drift_core::admm::{belief_stage_cost, BeliefOcp, BeliefState, CostWeights, Reference};
use drift_core::ilqr::OcpDefinition;
use drift_core::vehicle::{jacobians_nominal, step_nominal, Control, State, VehicleParams};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const POINTS: usize = 100;
const TOL: f64 = 1e-4;

#[test]
fn nominal_dynamics_jacobians() {
    let p = VehicleParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..POINTS {
        let (x, u) = random_drift_point(&mut rng);
        let z = [x.v, x.beta, x.r, u.delta, u.fxr];
        let f = |z: &[f64]| {
            let n = step_nominal(
                &State::new(z[0], z[1], z[2]),
                &Control::new(z[3], z[4]),
                &p,
                0.1,
            )
            .unwrap();
            vec![n.v, n.beta, n.r]
        };
        let numeric = central_jacobian(f, &z, &steps(&z));
        let (a, b) = jacobians_nominal(&x, &u, &p, 0.1).unwrap();
        let mut analytic = DMatrix::zeros(3, 5);
        analytic.view_mut((0, 0), (3, 3)).copy_from(&a);
        analytic.view_mut((0, 3), (3, 2)).copy_from(&b);
        worst = worst.max(relative_error(&analytic, &numeric, 1e-12));
    }
    assert!(worst < TOL, "worst relative error {worst:e}");
}

#[test]
fn gp_mean_and_variance_jacobians() {
    let gp = trained_gp(2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_mean, mut worst_var): (f64, f64) = (0.0, 0.0);
    for _ in 0..POINTS {
        let (x, u) = random_drift_point(&mut rng);
        let z = [x.v, x.beta, x.r, u.delta, u.fxr];
        let eval = |z: &[f64]| {
            gp.predict_residual(&State::new(z[0], z[1], z[2]), &Control::new(z[3], z[4]))
                .unwrap()
        };
        let num_mean = central_jacobian(|z| eval(z).mean.to_vec(), &z, &steps(&z));
        let num_var = central_jacobian(|z| eval(z).var.to_vec(), &z, &steps(&z));
        let (jm, jv) = gp.residual_jacobians(&x, &u).unwrap();
        let jm = DMatrix::from_fn(3, 5, |i, j| jm[(i, j)]);
        let jv = DMatrix::from_fn(3, 5, |i, j| jv[(i, j)]);
        worst_mean = worst_mean.max(relative_error(&jm, &num_mean, 1e-12));
        worst_var = worst_var.max(relative_error(&jv, &num_var, 1e-12));
    }
    assert!(
        worst_mean < TOL,
        "mean: worst relative error {worst_mean:e}"
    );
    assert!(
        worst_var < TOL,
        "variance: worst relative error {worst_var:e}"
    );
}

#[test]
fn belief_stage_cost_gradient_and_hessian() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_g, mut worst_h): (f64, f64) = (0.0, 0.0);
    for _ in 0..POINTS {
        let (x, u) = random_drift_point(&mut rng);
        let (xr, ur) = random_drift_point(&mut rng);
        let reference = Reference {
            x_ref: xr,
            u_ref: ur,
        };
        let weights = CostWeights {
            q: std::array::from_fn(|_| rng.random_range(0.1..5.0)),
            qf: [1.0; 3],
            r: [rng.random_range(0.1..5.0), rng.random_range(1e-8..1e-6)],
        };
        let sigma: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.1));
        let z = [
            x.v, x.beta, x.r, sigma[0], sigma[1], sigma[2], u.delta, u.fxr,
        ];
        let split = |z: &[f64]| {
            (
                BeliefState {
                    mu: State::new(z[0], z[1], z[2]),
                    sigma: [z[3], z[4], z[5]],
                },
                Control::new(z[6], z[7]),
            )
        };
        let value = |z: &[f64]| {
            let (b, u) = split(z);
            vec![belief_stage_cost(&b, &u, &reference, &weights).0]
        };
        let gradient = |z: &[f64]| {
            let (b, u) = split(z);
            let e = belief_stage_cost(&b, &u, &reference, &weights).1;
            e.l_x
                .iter()
                .chain(e.l_u.iter())
                .copied()
                .collect::<Vec<f64>>()
        };
        let h = steps(&z);
        let analytic_g = DMatrix::from_row_slice(1, 8, &gradient(&z));
        worst_g = worst_g.max(relative_error(
            &analytic_g,
            &central_jacobian(value, &z, &h),
            1e-12,
        ));

        let (b, uu) = split(&z);
        let e = belief_stage_cost(&b, &uu, &reference, &weights).1;
        let mut hess = DMatrix::zeros(8, 8);
        hess.view_mut((0, 0), (6, 6)).copy_from(&e.l_xx);
        hess.view_mut((6, 6), (2, 2)).copy_from(&e.l_uu);
        hess.view_mut((6, 0), (2, 6)).copy_from(&e.l_ux);
        hess.view_mut((0, 6), (6, 2)).copy_from(&e.l_ux.transpose());
        worst_h = worst_h.max(relative_error(
            &hess,
            &central_jacobian(gradient, &z, &h),
            1e-12,
        ));
    }
    assert!(worst_g < TOL, "gradient: worst relative error {worst_g:e}");
    assert!(worst_h < TOL, "hessian: worst relative error {worst_h:e}");
}

#[test]
fn belief_dynamics_jacobians_with_trained_gp() {
    let gp = trained_gp(5);
    let p = VehicleParams::default();
    let refs = vec![
        Reference {
            x_ref: State::new(16.0, -0.9, 0.8),
            u_ref: Control::new(-0.35, 1e4)
        };
        5
    ];
    let ocp = BeliefOcp {
        params: &p,
        gp: &gp,
        ts: 0.1,
        references: &refs,
        weights: CostWeights {
            q: [1.0; 3],
            qf: [1.0; 3],
            r: [1.0, 1e-7],
        },
        control_scale: [1.0, 1e4],
        consensus: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..POINTS {
        let (x, u) = random_drift_point(&mut rng);
        let sigma: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.01));
        let w = ocp.scale(&u);
        let z = [x.v, x.beta, x.r, sigma[0], sigma[1], sigma[2], w[0], w[1]];
        let f = |z: &[f64]| {
            let xb = DVector::from_column_slice(&z[..6]);
            let wb = DVector::from_column_slice(&z[6..]);
            ocp.dynamics(&xb, &wb, 0)
                .unwrap()
                .iter()
                .copied()
                .collect::<Vec<f64>>()
        };
        let numeric = central_jacobian(f, &z, &steps(&z));
        let (a, b) = ocp
            .dynamics_jacobians(
                &DVector::from_column_slice(&z[..6]),
                &DVector::from_column_slice(&z[6..]),
                0,
            )
            .unwrap();
        let mut analytic = DMatrix::zeros(6, 8);
        analytic.view_mut((0, 0), (6, 6)).copy_from(&a);
        analytic.view_mut((0, 6), (6, 2)).copy_from(&b);
        worst = worst.max(relative_error(&analytic, &numeric, 1e-12));
    }
    assert!(worst < TOL, "worst relative error {worst:e}");
}
