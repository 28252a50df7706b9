//! Clothoid paths and projection of poses onto them.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{DriftError, Result};
use crate::vehicle::Pose;

/// Arc-length spacing of the precomputed sample table (m).
pub const SAMPLE_SPACING: f64 = 0.1;
/// Lateral distance beyond which the vehicle counts as off the path (m).
pub const OFF_PATH_LIMIT: f64 = 10.0;
/// Name of the built-in drift loop.
pub const DEFAULT_PATH_NAME: &str = "clothoid-loop-20-45";

const CURVATURE_JUMP_TOL: f64 = 1e-9;

/// Curvature linear in arc length: `k(t) = k0 + k_rate * t` for `t in [0, length]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub length: f64,
    pub k0: f64,
    pub k_rate: f64,
}

impl Segment {
    pub fn k_end(&self) -> f64 {
        self.k0 + self.k_rate * self.length
    }
}

/// Serialized path description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PathSpec {
    Named(String),
    Segments {
        segments: Vec<Segment>,
        #[serde(default = "default_closed")]
        closed: bool,
    },
}

fn default_closed() -> bool {
    true
}

impl Default for PathSpec {
    fn default() -> Self {
        PathSpec::Named(DEFAULT_PATH_NAME.to_string())
    }
}

impl PathSpec {
    pub fn build(&self) -> Result<ClothoidPath> {
        match self {
            PathSpec::Named(name) if name == DEFAULT_PATH_NAME => {
                ClothoidPath::new(default_loop_segments(), true)
            }
            PathSpec::Named(name) => {
                Err(DriftError::Path(format!("unknown built-in path '{name}'")))
            }
            PathSpec::Segments { segments, closed } => ClothoidPath::new(segments.clone(), *closed),
        }
    }
}

/// Closed left-hand loop alternating between R = 20 m and R = 45 m arcs,
/// joined by 200 m linear-curvature ramps (about 884 m in total).
pub fn default_loop_segments() -> Vec<Segment> {
    let (k_tight, k_wide) = (1.0 / 20.0, 1.0 / 45.0);
    let ramp = 200.0;
    let tight_angle = 0.6;
    let ramp_angle = ramp * (k_tight + k_wide) / 2.0;
    // Each half turns by 5π, so the second half retraces the first rotated
    // by π and the loop closes after five windings.
    let wide_angle = 5.0 * PI - tight_angle - 2.0 * ramp_angle;
    let half = [
        Segment {
            length: tight_angle / k_tight,
            k0: k_tight,
            k_rate: 0.0,
        },
        Segment {
            length: ramp,
            k0: k_tight,
            k_rate: (k_wide - k_tight) / ramp,
        },
        Segment {
            length: wide_angle / k_wide,
            k0: k_wide,
            k_rate: 0.0,
        },
        Segment {
            length: ramp,
            k0: k_wide,
            k_rate: (k_tight - k_wide) / ramp,
        },
    ];
    half.iter().chain(half.iter()).copied().collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSample {
    pub s: f64,
    pub x: f64,
    pub y: f64,
    pub phi: f64,
    pub k: f64,
}

#[derive(Debug, Clone)]
pub struct ClothoidPath {
    segments: Vec<Segment>,
    /// Arc length and pose at the start of each segment.
    starts: Vec<PathSample>,
    samples: Vec<PathSample>,
    closed: bool,
    total_length: f64,
}

/// Integrates the clothoid equations over `[0, t]` from `start` with curvature
/// `k0 + rate * tau` (composite Simpson).
fn advance(start: &PathSample, k0: f64, rate: f64, t: f64) -> PathSample {
    let phi = |tau: f64| start.phi + k0 * tau + 0.5 * rate * tau * tau;
    let n = ((t.abs() / 0.01).ceil() as usize)
        .max(2)
        .next_multiple_of(2);
    let h = t / n as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for i in 0..=n {
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let p = phi(i as f64 * h);
        sx += w * p.cos();
        sy += w * p.sin();
    }
    PathSample {
        s: start.s + t,
        x: start.x + sx * h / 3.0,
        y: start.y + sy * h / 3.0,
        phi: phi(t),
        k: k0 + rate * t,
    }
}

impl ClothoidPath {
    pub fn new(segments: Vec<Segment>, closed: bool) -> Result<Self> {
        if segments.is_empty() {
            return Err(DriftError::Path("path needs at least one segment".into()));
        }
        for (i, seg) in segments.iter().enumerate() {
            if !(seg.length > 0.0
                && seg.length.is_finite()
                && seg.k0.is_finite()
                && seg.k_rate.is_finite())
            {
                return Err(DriftError::Path(format!("segment {i} is invalid: {seg:?}")));
            }
        }
        let joints = segments.windows(2).map(|w| (w[0].k_end(), w[1].k0));
        let wrap = closed.then(|| (segments[segments.len() - 1].k_end(), segments[0].k0));
        for (a, b) in joints.chain(wrap) {
            if (a - b).abs() > CURVATURE_JUMP_TOL {
                return Err(DriftError::Path(format!(
                    "curvature jumps from {a} to {b} at a segment joint"
                )));
            }
        }

        let mut starts = Vec::with_capacity(segments.len());
        let mut cur = PathSample {
            s: 0.0,
            x: 0.0,
            y: 0.0,
            phi: 0.0,
            k: segments[0].k0,
        };
        for seg in &segments {
            starts.push(cur);
            cur = advance(&cur, seg.k0, seg.k_rate, seg.length);
        }
        let total_length = cur.s;
        let mut path = Self {
            segments,
            starts,
            samples: Vec::new(),
            closed,
            total_length,
        };
        // Each sample is integrated from its predecessor when both lie in the
        // same segment, and from the segment start otherwise.
        let count = (total_length / SAMPLE_SPACING).floor() as usize;
        let mut samples: Vec<PathSample> = Vec::with_capacity(count + 1);
        for i in 0..=count {
            let s = i as f64 * SAMPLE_SPACING;
            let j = path.segment_index(s);
            let (seg, start) = (&path.segments[j], &path.starts[j]);
            let t = (s - start.s).min(seg.length);
            let next = match samples.last() {
                Some(prev) if prev.s >= start.s => {
                    let tp = prev.s - start.s;
                    let mut q = advance(prev, seg.k0 + seg.k_rate * tp, seg.k_rate, t - tp);
                    q.s = s;
                    q
                }
                _ => advance(start, seg.k0, seg.k_rate, t),
            };
            samples.push(next);
        }
        path.samples = samples;
        Ok(path)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn samples(&self) -> &[PathSample] {
        &self.samples
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn total_length(&self) -> f64 {
        self.total_length
    }

    /// Maps `s` into `[0, total_length)` for closed paths, clamps otherwise.
    pub fn wrap_s(&self, s: f64) -> f64 {
        if self.closed {
            s.rem_euclid(self.total_length)
        } else {
            s.clamp(0.0, self.total_length)
        }
    }

    fn segment_index(&self, s: f64) -> usize {
        match self.starts.binary_search_by(|p| p.s.total_cmp(&s)) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        }
    }

    fn sample_at_unwrapped(&self, s: f64) -> PathSample {
        let j = self.segment_index(s);
        let seg = &self.segments[j];
        let start = &self.starts[j];
        let t = (s - start.s).min(seg.length);
        // Integrate from the nearest table entry inside the same segment.
        let i = (s / SAMPLE_SPACING).floor() as usize;
        if let Some(base) = self.samples.get(i) {
            if base.s >= start.s {
                let tb = base.s - start.s;
                return advance(base, seg.k0 + seg.k_rate * tb, seg.k_rate, t - tb);
            }
        }
        advance(start, seg.k0, seg.k_rate, t)
    }

    /// Pose and curvature at arc length `s` (wrapped or clamped).
    pub fn sample_at(&self, s: f64) -> PathSample {
        let s = self.wrap_s(s);
        let mut p = self.sample_at_unwrapped(s);
        p.s = s;
        p
    }

    pub fn curvature_at(&self, s: f64) -> f64 {
        let s = self.wrap_s(s);
        let j = self.segment_index(s);
        let seg = &self.segments[j];
        seg.k0 + seg.k_rate * (s - self.starts[j].s).min(seg.length)
    }

    pub fn pose_at(&self, s: f64) -> Pose {
        let p = self.sample_at(s);
        Pose {
            x: p.x,
            y: p.y,
            phi: p.phi,
        }
    }

    /// Gap between the end and start of the path (m).
    pub fn closure_error(&self) -> f64 {
        let end = self.sample_at_unwrapped(self.total_length);
        end.x.hypot(end.y)
    }
}

/// Tracking error of a pose relative to the path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingError {
    /// Signed lateral offset, positive to the left of the path tangent.
    pub e: f64,
    /// Course direction error `phi + beta - phi_p`, wrapped to `(-pi, pi]`.
    pub delta_phi: f64,
    pub s_proj: f64,
    pub k_p: f64,
}

pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Half-width of the sample window scanned around the hint (m).
const HINT_WINDOW: f64 = 15.0;

/// Projects a pose onto the path. With a hint, only samples within
/// [`HINT_WINDOW`] of it are scanned unless the best one lies on the window
/// edge. Fails with [`DriftError::OffPath`] beyond [`OFF_PATH_LIMIT`].
pub fn project_to_path(
    pose: &Pose,
    beta: f64,
    path: &ClothoidPath,
    s_hint: Option<f64>,
) -> Result<TrackingError> {
    if !(pose.x.is_finite() && pose.y.is_finite() && pose.phi.is_finite() && beta.is_finite()) {
        return Err(DriftError::InvalidState(format!(
            "non-finite pose {pose:?}"
        )));
    }
    let samples = path.samples();
    let n = samples.len();
    let dist2 = |i: usize| {
        let p = &samples[i];
        (pose.x - p.x).powi(2) + (pose.y - p.y).powi(2)
    };
    let global = || {
        (0..n)
            .min_by(|&a, &b| dist2(a).total_cmp(&dist2(b)))
            .unwrap_or(0)
    };
    let best = match s_hint {
        Some(hint) => {
            let centre = (path.wrap_s(hint) / SAMPLE_SPACING).round() as isize;
            let half = (HINT_WINDOW / SAMPLE_SPACING) as isize;
            let index = |o: isize| -> Option<usize> {
                let i = centre + o;
                if path.is_closed() {
                    Some(i.rem_euclid(n as isize) as usize)
                } else {
                    (0..n as isize).contains(&i).then_some(i as usize)
                }
            };
            let (mut best_o, mut best_i, mut best_d) = (0, None, f64::INFINITY);
            for o in -half..=half {
                if let Some(i) = index(o) {
                    let d = dist2(i);
                    if d < best_d {
                        (best_o, best_i, best_d) = (o, Some(i), d);
                    }
                }
            }
            match best_i {
                Some(i) if best_o.abs() < half => i,
                _ => global(),
            }
        }
        None => global(),
    };

    // Newton refinement of the orthogonality condition around the best sample.
    let s0 = samples[best].s;
    let mut s = s0;
    for _ in 0..8 {
        let c = path.sample_at(s);
        let (dx, dy) = (pose.x - c.x, pose.y - c.y);
        let along = dx * c.phi.cos() + dy * c.phi.sin();
        let lateral = -dx * c.phi.sin() + dy * c.phi.cos();
        let denom = (1.0 - c.k * lateral).max(0.1);
        let step = along / denom;
        let mut next = (s + step).clamp(s0 - SAMPLE_SPACING, s0 + SAMPLE_SPACING);
        if !path.is_closed() {
            next = next.clamp(0.0, path.total_length());
        }
        if (next - s).abs() < 1e-12 {
            s = next;
            break;
        }
        s = next;
    }
    let c = path.sample_at(s);
    let (dx, dy) = (pose.x - c.x, pose.y - c.y);
    let e = -dx * c.phi.sin() + dy * c.phi.cos();
    if e.abs() > OFF_PATH_LIMIT {
        return Err(DriftError::OffPath(e));
    }
    Ok(TrackingError {
        e,
        delta_phi: wrap_angle(pose.phi + beta - c.phi),
        s_proj: c.s,
        k_p: c.k,
    })
}
