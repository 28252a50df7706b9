use std::f64::consts::PI;

use drift_core::path::{project_to_path, wrap_angle, ClothoidPath, PathSpec, Segment};
use drift_core::vehicle::Pose;
use drift_core::DriftError;
use proptest::prelude::*;

fn circle(radius: f64) -> ClothoidPath {
    ClothoidPath::new(
        vec![Segment {
            length: 2.0 * PI * radius,
            k0: 1.0 / radius,
            k_rate: 0.0,
        }],
        true,
    )
    .unwrap()
}

proptest! {
    #[test]
    fn circle_projection_matches_geometry(
        radius in 15.0f64..60.0, theta in 0.0f64..(2.0 * PI), offset in -8.0f64..8.0,
        heading in -PI..PI, beta in -1.0f64..1.0, hinted in any::<bool>(),
    ) {
        let path = circle(radius);
        // Starts at the origin heading +x and turns left around (0, radius).
        let d = radius - offset;
        let pose = Pose { x: d * theta.sin(), y: radius - d * theta.cos(), phi: heading };
        let hint = hinted.then_some(radius * theta + 3.0);
        let err = project_to_path(&pose, beta, &path, hint).unwrap();
        prop_assert!((err.e - offset).abs() < 2e-3, "e {} vs {}", err.e, offset);
        let ds = (err.s_proj - radius * theta).rem_euclid(path.total_length());
        let ds = ds.min(path.total_length() - ds);
        prop_assert!(ds < 2e-3, "s {} vs {}", err.s_proj, radius * theta);
        prop_assert!((err.k_p - 1.0 / radius).abs() < 1e-12);
        let tangent = theta;
        prop_assert!(wrap_angle(err.delta_phi - (heading + beta - tangent)).abs() < 1e-3);
    }
}

/// Trapezoid integration of the heading on a fine grid.
fn integrate(seg: &Segment, s: f64) -> (f64, f64, f64) {
    let n = 200_000;
    let h = s / n as f64;
    let phi = |t: f64| seg.k0 * t + 0.5 * seg.k_rate * t * t;
    let (mut x, mut y) = (0.0, 0.0);
    for i in 0..n {
        let (a, b) = (phi(i as f64 * h), phi((i + 1) as f64 * h));
        x += 0.5 * h * (a.cos() + b.cos());
        y += 0.5 * h * (a.sin() + b.sin());
    }
    (x, y, phi(s))
}

#[test]
fn clothoid_matches_quadrature() {
    let seg = Segment {
        length: 120.0,
        k0: -0.01,
        k_rate: 4e-4,
    };
    let path = ClothoidPath::new(vec![seg], false).unwrap();
    for s in [7.3, 50.0, 99.95, 120.0] {
        let (x, y, phi) = integrate(&seg, s);
        let p = path.sample_at(s);
        assert!((p.x - x).abs() < 1e-6 && (p.y - y).abs() < 1e-6, "s = {s}");
        assert!((p.phi - phi).abs() < 1e-12);
        assert!((p.k - (seg.k0 + seg.k_rate * s)).abs() < 1e-12);
    }
}

#[test]
fn rejects_curvature_jump() {
    let segs = vec![
        Segment {
            length: 10.0,
            k0: 0.0,
            k_rate: 0.0,
        },
        Segment {
            length: 10.0,
            k0: 0.05,
            k_rate: 0.0,
        },
    ];
    assert!(ClothoidPath::new(segs, false).is_err());
    assert!(ClothoidPath::new(Vec::new(), false).is_err());
}

#[test]
fn default_loop_is_closed_and_smooth() {
    let path = PathSpec::default().build().unwrap();
    assert!(path.is_closed());
    assert!(
        path.closure_error() < 1e-6,
        "closure {}",
        path.closure_error()
    );
    assert!(
        (path.total_length() - 884.0).abs() < 1.0,
        "length {}",
        path.total_length()
    );
    let end = path.sample_at(path.total_length() - 1e-9);
    assert!(wrap_angle(end.phi).abs() < 1e-6);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut s = 0.0;
    let mut prev = path.curvature_at(0.0);
    while s < path.total_length() {
        let k = path.curvature_at(s);
        assert!((k - prev).abs() < 1e-3, "jump at s = {s}");
        (lo, hi, prev) = (lo.min(k), hi.max(k), k);
        s += 0.5;
    }
    assert!((lo - 1.0 / 45.0).abs() < 1e-9 && (hi - 1.0 / 20.0).abs() < 1e-9);
}

#[test]
fn hinted_projection_on_default_loop_matches_scan() {
    let path = PathSpec::default().build().unwrap();
    let mut s = 3.0;
    while s < path.total_length() {
        let c = path.sample_at(s);
        let offset = 2.5 * (s * 0.37).sin();
        let pose = Pose {
            x: c.x - offset * c.phi.sin(),
            y: c.y + offset * c.phi.cos(),
            phi: c.phi,
        };
        let err = project_to_path(&pose, 0.0, &path, Some(s + 4.0)).unwrap();
        // Local scan at 1 mm resolution.
        let (mut best_s, mut best_d) = (s, f64::INFINITY);
        let mut t = s - 5.0;
        while t < s + 5.0 {
            let q = path.sample_at(t);
            let d = (pose.x - q.x).hypot(pose.y - q.y);
            if d < best_d {
                (best_s, best_d) = (t, d);
            }
            t += 1e-3;
        }
        assert!(
            (err.e.abs() - best_d).abs() < 2e-3,
            "s = {s}: |e| {} vs {}",
            err.e.abs(),
            best_d
        );
        let ds = wrap_angle((err.s_proj - best_s) / path.total_length() * 2.0 * PI)
            * path.total_length()
            / (2.0 * PI);
        assert!(
            ds.abs() < 2e-3,
            "s = {s}: s_proj {} vs {}",
            err.s_proj,
            best_s
        );
        s += 17.0;
    }
}

#[test]
fn far_pose_is_off_path() {
    let path = circle(20.0);
    let pose = Pose {
        x: 0.0,
        y: -15.0,
        phi: 0.0,
    };
    assert!(matches!(
        project_to_path(&pose, 0.0, &path, None),
        Err(DriftError::OffPath(_))
    ));
}
