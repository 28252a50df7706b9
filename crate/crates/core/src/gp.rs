//! Residual learning with three independent scalar Gaussian processes.
//!
//! Each output dimension `(V, beta, r)` owns a bounded dictionary of training
//! points, SE-ARD hyperparameters and a cached Cholesky factorization of the
//! regularized Gram matrix. Inputs are `z = [V, beta, r, delta, Fxr]`,
//! standardized per dimension before the kernel is evaluated.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SMatrix};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DriftError, Result};
use crate::vehicle::{Control, State};

pub const INPUT_DIM: usize = 5;
pub const OUTPUT_DIM: usize = 3;
pub const DEFAULT_CAPACITY: usize = 50;

pub type GpInput = [f64; INPUT_DIM];
pub type ResidualJacobian = SMatrix<f64, OUTPUT_DIM, INPUT_DIM>;

const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-4;
/// Above this many candidate subsets eviction falls back to greedy removal.
const EXACT_EVICTION_LIMIT: u64 = 20_000;
/// Smallest per-input standardization scale over [V, β, r, δ, Fxr], so that
/// tightly clustered data does not shrink the length-scales below physical
/// resolution.
pub const INPUT_STD_FLOOR: GpInput = [0.5, 0.02, 0.02, 0.02, 500.0];
/// Lower bound on the squared length-scales in standardized units.
const LAMBDA_MIN: f64 = 1.0;

pub fn gp_input(x: &State, u: &Control) -> GpInput {
    [x.v, x.beta, x.r, u.delta, u.fxr]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    pub sigma_f2: f64,
    pub sigma_w2: f64,
    /// Squared length-scales (diagonal of the ARD matrix), in standardized units.
    pub lambda: [f64; INPUT_DIM],
}

impl Default for GpHyperparams {
    fn default() -> Self {
        Self {
            sigma_f2: 1.0,
            sigma_w2: 1e-2,
            lambda: [1.0; INPUT_DIM],
        }
    }
}

impl GpHyperparams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma_f2 > 0.0
            && self.sigma_w2 > 0.0
            && self.lambda.iter().all(|l| *l > 0.0 && l.is_finite())
            && self.sigma_f2.is_finite()
            && self.sigma_w2.is_finite();
        if ok {
            Ok(())
        } else {
            Err(DriftError::InvalidParameter(format!(
                "GP hyperparameters must be positive: {self:?}"
            )))
        }
    }

    fn to_log(self) -> [f64; INPUT_DIM + 2] {
        let mut t = [0.0; INPUT_DIM + 2];
        t[0] = self.sigma_f2.ln();
        t[1] = self.sigma_w2.ln();
        for (d, l) in self.lambda.iter().enumerate() {
            t[2 + d] = l.ln();
        }
        t
    }

    fn from_log(t: &[f64; INPUT_DIM + 2]) -> Self {
        let mut lambda = [0.0; INPUT_DIM];
        for (d, l) in lambda.iter_mut().enumerate() {
            *l = t[2 + d].exp();
        }
        Self {
            sigma_f2: t[0].exp(),
            sigma_w2: t[1].exp(),
            lambda,
        }
    }
}

/// SE-ARD kernel `sigma_f2 * exp(-0.5 (z - z2)^T Lambda^-1 (z - z2))`.
pub fn kernel(z: &GpInput, z2: &GpInput, h: &GpHyperparams) -> f64 {
    h.sigma_f2 * (-0.5 * scaled_sq_dist(z, z2, &h.lambda)).exp()
}

fn scaled_sq_dist(z: &GpInput, z2: &GpInput, lambda: &[f64; INPUT_DIM]) -> f64 {
    z.iter()
        .zip(z2)
        .zip(lambda)
        .map(|((a, b), l)| (a - b) * (a - b) / l)
        .sum()
}

/// Per-dimension affine standardization of GP inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub mean: GpInput,
    pub std: GpInput,
}

impl Default for InputScaling {
    fn default() -> Self {
        Self {
            mean: [0.0; INPUT_DIM],
            std: [1.0; INPUT_DIM],
        }
    }
}

impl InputScaling {
    pub fn apply(&self, z: &GpInput) -> GpInput {
        let mut out = [0.0; INPUT_DIM];
        for d in 0..INPUT_DIM {
            out[d] = (z[d] - self.mean[d]) / self.std[d];
        }
        out
    }
}

/// Welford accumulator for input mean and standard deviation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunningScaler {
    count: usize,
    mean: GpInput,
    m2: GpInput,
}

impl RunningScaler {
    pub fn push(&mut self, z: &GpInput) {
        self.count += 1;
        let n = self.count as f64;
        for d in 0..INPUT_DIM {
            let delta = z[d] - self.mean[d];
            self.mean[d] += delta / n;
            self.m2[d] += delta * (z[d] - self.mean[d]);
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn scaling(&self) -> InputScaling {
        if self.count < 2 {
            return InputScaling {
                mean: self.mean,
                std: INPUT_STD_FLOOR,
            };
        }
        let mut std = [1.0; INPUT_DIM];
        for d in 0..INPUT_DIM {
            let s = (self.m2[d] / (self.count - 1) as f64).sqrt();
            std[d] = s.max(INPUT_STD_FLOOR[d]);
        }
        InputScaling {
            mean: self.mean,
            std,
        }
    }
}

#[derive(Debug, Clone)]
struct Factorization {
    hyper: GpHyperparams,
    scaled: Vec<GpInput>,
    chol: Cholesky<f64, Dyn>,
    /// `(K + sigma_w2 I)^-1 Y`
    alpha: DVector<f64>,
    jitter: f64,
}

/// Bounded set of training points for one output dimension.
#[derive(Debug, Clone)]
pub struct GpDictionary {
    inputs: Vec<GpInput>,
    outputs: Vec<f64>,
    capacity: usize,
    scaling: InputScaling,
    cache: Option<Factorization>,
}

impl GpDictionary {
    pub fn new(capacity: usize) -> Self {
        Self {
            inputs: Vec::new(),
            outputs: Vec::new(),
            capacity,
            scaling: InputScaling::default(),
            cache: None,
        }
    }

    /// Builds a dictionary from raw points; `inputs.len()` may exceed capacity
    /// only transiently through [`update_dictionary`].
    pub fn from_points(
        inputs: Vec<GpInput>,
        outputs: Vec<f64>,
        capacity: usize,
        scaling: InputScaling,
    ) -> Result<Self> {
        if inputs.len() != outputs.len() {
            return Err(DriftError::InvalidParameter(format!(
                "{} inputs but {} outputs",
                inputs.len(),
                outputs.len()
            )));
        }
        if inputs.len() > capacity {
            return Err(DriftError::InvalidParameter(format!(
                "{} points exceed capacity {capacity}",
                inputs.len()
            )));
        }
        Ok(Self {
            inputs,
            outputs,
            capacity,
            scaling,
            cache: None,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn inputs(&self) -> &[GpInput] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    pub fn scaling(&self) -> &InputScaling {
        &self.scaling
    }

    pub fn set_scaling(&mut self, scaling: InputScaling) {
        if scaling != self.scaling {
            self.scaling = scaling;
            self.cache = None;
        }
    }

    fn scaled_inputs(&self) -> Vec<GpInput> {
        self.inputs.iter().map(|z| self.scaling.apply(z)).collect()
    }

    /// Recomputes the cached factorization for `h`.
    pub fn refresh(&mut self, h: &GpHyperparams) -> Result<()> {
        self.cache = if self.is_empty() {
            None
        } else {
            Some(self.factorize(h)?)
        };
        Ok(())
    }

    fn cached_for(&self, h: &GpHyperparams) -> Option<&Factorization> {
        self.cache.as_ref().filter(|f| f.hyper == *h)
    }

    fn factorize(&self, h: &GpHyperparams) -> Result<Factorization> {
        let scaled = self.scaled_inputs();
        let n = scaled.len();
        let mut gram = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let k = kernel(&scaled[i], &scaled[j], h);
                gram[(i, j)] = k;
                gram[(j, i)] = k;
            }
            gram[(i, i)] += h.sigma_w2;
        }
        let (chol, jitter) = cholesky_with_jitter(gram, h.sigma_f2)?;
        let alpha = chol.solve(&DVector::from_column_slice(&self.outputs));
        Ok(Factorization {
            hyper: *h,
            scaled,
            chol,
            alpha,
            jitter,
        })
    }

    /// Diagonal jitter used by the current factorization, if any.
    pub fn jitter(&self) -> Option<f64> {
        self.cache.as_ref().map(|f| f.jitter)
    }
}

fn cholesky_with_jitter(gram: DMatrix<f64>, sigma_f2: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(gram.clone()) {
        return Ok((c, 0.0));
    }
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-12) {
        let jitter = rel * sigma_f2;
        let mut g = gram.clone();
        for i in 0..g.nrows() {
            g[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(g) {
            return Ok((c, jitter));
        }
        rel *= 10.0;
    }
    Err(DriftError::Factorization {
        jitter: JITTER_MAX * sigma_f2,
    })
}

/// Posterior mean and variance of the latent function at a raw input.
pub fn posterior(dict: &GpDictionary, h: &GpHyperparams, z_star: &GpInput) -> Result<(f64, f64)> {
    if dict.is_empty() {
        return Ok((0.0, h.sigma_f2));
    }
    let owned;
    let fact = match dict.cached_for(h) {
        Some(f) => f,
        None => {
            owned = dict.factorize(h)?;
            &owned
        }
    };
    let zs = dict.scaling.apply(z_star);
    let kstar = DVector::from_iterator(
        fact.scaled.len(),
        fact.scaled.iter().map(|zi| kernel(&zs, zi, h)),
    );
    let mean = kstar.dot(&fact.alpha);
    let v = fact
        .chol
        .l()
        .solve_lower_triangular(&kstar)
        .expect("Cholesky factor is nonsingular");
    let var = (h.sigma_f2 - v.norm_squared()).clamp(0.0, h.sigma_f2);
    Ok((mean, var))
}

/// Posterior mean, variance and their gradients with respect to the raw input.
pub fn posterior_with_gradient(
    dict: &GpDictionary,
    h: &GpHyperparams,
    z_star: &GpInput,
) -> Result<(f64, f64, GpInput, GpInput)> {
    if dict.is_empty() {
        return Ok((0.0, h.sigma_f2, [0.0; INPUT_DIM], [0.0; INPUT_DIM]));
    }
    let owned;
    let fact = match dict.cached_for(h) {
        Some(f) => f,
        None => {
            owned = dict.factorize(h)?;
            &owned
        }
    };
    let zs = dict.scaling.apply(z_star);
    let n = fact.scaled.len();
    let kstar = DVector::from_iterator(n, fact.scaled.iter().map(|zi| kernel(&zs, zi, h)));
    let mean = kstar.dot(&fact.alpha);
    let l = fact.chol.l();
    let v = l
        .solve_lower_triangular(&kstar)
        .expect("Cholesky factor is nonsingular");
    let var_raw = h.sigma_f2 - v.norm_squared();
    // K^-1 k* for the variance gradient.
    let kinv_k = l
        .tr_solve_lower_triangular(&v)
        .expect("Cholesky factor is nonsingular");
    let var = var_raw.clamp(0.0, h.sigma_f2);

    let mut dmean = [0.0; INPUT_DIM];
    let mut dvar = [0.0; INPUT_DIM];
    for (i, zi) in fact.scaled.iter().enumerate() {
        for d in 0..INPUT_DIM {
            // dk/dz_std[d] = -k (z_d - zi_d) / lambda_d
            let dk = -kstar[i] * (zs[d] - zi[d]) / h.lambda[d];
            dmean[d] += fact.alpha[i] * dk;
            dvar[d] += -2.0 * kinv_k[i] * dk;
        }
    }
    for d in 0..INPUT_DIM {
        dmean[d] /= dict.scaling.std[d];
        dvar[d] /= dict.scaling.std[d];
    }
    if var_raw <= 0.0 || var_raw >= h.sigma_f2 {
        dvar = [0.0; INPUT_DIM];
    }
    Ok((mean, var, dmean, dvar))
}

/// Log marginal likelihood `-1/2 log|K| - 1/2 Y^T K^-1 Y - N/2 log(2 pi)` with
/// `K = K_ZZ + sigma_w2 I`.
pub fn log_marginal_likelihood(dict: &GpDictionary, h: &GpHyperparams) -> Result<f64> {
    Ok(lml_and_gradient(dict, h, false)?.0)
}

fn lml_and_gradient(
    dict: &GpDictionary,
    h: &GpHyperparams,
    with_gradient: bool,
) -> Result<(f64, [f64; INPUT_DIM + 2])> {
    let scaled = dict.scaled_inputs();
    let n = scaled.len();
    let y = DVector::from_column_slice(&dict.outputs);
    let mut kf = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let k = kernel(&scaled[i], &scaled[j], h);
            kf[(i, j)] = k;
            kf[(j, i)] = k;
        }
    }
    let mut gram = kf.clone();
    for i in 0..n {
        gram[(i, i)] += h.sigma_w2;
    }
    let chol = Cholesky::new(gram).ok_or(DriftError::Factorization { jitter: 0.0 })?;
    let alpha = chol.solve(&y);
    let log_det: f64 = chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|d| d.ln())
        .sum::<f64>()
        * 2.0;
    let lml =
        -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    let mut grad = [0.0; INPUT_DIM + 2];
    if with_gradient {
        let kinv = chol.inverse();
        let w = &alpha * alpha.transpose() - kinv;
        let mut g_f = 0.0;
        let mut g_w = 0.0;
        let mut g_l = [0.0; INPUT_DIM];
        for i in 0..n {
            g_w += w[(i, i)] * h.sigma_w2;
            for j in 0..n {
                let wk = w[(i, j)] * kf[(i, j)];
                g_f += wk;
                for d in 0..INPUT_DIM {
                    let diff = scaled[i][d] - scaled[j][d];
                    g_l[d] += wk * 0.5 * diff * diff / h.lambda[d];
                }
            }
        }
        grad[0] = 0.5 * g_f;
        grad[1] = 0.5 * g_w;
        for d in 0..INPUT_DIM {
            grad[2 + d] = 0.5 * g_l[d];
        }
    }
    Ok((lml, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub iterations: usize,
    pub restarts: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            iterations: 200,
            restarts: 3,
        }
    }
}

/// Box on the log-hyperparameters, relative to the output variance.
fn log_bounds(output_var: f64) -> ([f64; INPUT_DIM + 2], [f64; INPUT_DIM + 2]) {
    let v = output_var.max(1e-12);
    let mut lo = [LAMBDA_MIN.ln(); INPUT_DIM + 2];
    let mut hi = [(1e4f64).ln(); INPUT_DIM + 2];
    lo[0] = (1e-4 * v).ln();
    hi[0] = (1e3 * v).ln();
    lo[1] = (1e-8 * v).max(1e-14).ln();
    hi[1] = (10.0 * v).ln();
    (lo, hi)
}

fn output_variance(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Maximizes the log marginal likelihood by log-space gradient ascent with a
/// Barzilai-Borwein step and backtracking, from `h0` and `restarts - 1`
/// randomly perturbed starts. Returns `h0` if nothing improves on it.
pub fn fit_hyperparams<R: Rng + ?Sized>(
    dict: &GpDictionary,
    h0: &GpHyperparams,
    opts: &FitOptions,
    rng: &mut R,
) -> GpHyperparams {
    if dict.len() < 5 {
        return *h0;
    }
    let Ok(base) = log_marginal_likelihood(dict, h0) else {
        return *h0;
    };
    let (lo, hi) = log_bounds(output_variance(&dict.outputs));
    let mut best = (*h0, base);
    for restart in 0..opts.restarts.max(1) {
        let mut t = h0.to_log();
        if restart > 0 {
            for v in t.iter_mut() {
                *v += rng.random_range(-1.0..1.0);
            }
        }
        for d in 0..t.len() {
            t[d] = t[d].clamp(lo[d], hi[d]);
        }
        if let Some((h, lml)) = ascend(dict, t, &lo, &hi, opts.iterations) {
            if lml > best.1 {
                best = (h, lml);
            }
        }
    }
    best.0
}

fn ascend(
    dict: &GpDictionary,
    mut t: [f64; INPUT_DIM + 2],
    lo: &[f64; INPUT_DIM + 2],
    hi: &[f64; INPUT_DIM + 2],
    iterations: usize,
) -> Option<(GpHyperparams, f64)> {
    const P: usize = INPUT_DIM + 2;
    let (mut f, mut g) = lml_and_gradient(dict, &GpHyperparams::from_log(&t), true).ok()?;
    let mut step = 0.1 / (norm(&g) + 1e-12);
    for _ in 0..iterations {
        let mut accepted = None;
        for _ in 0..30 {
            let mut cand = [0.0; P];
            for d in 0..P {
                cand[d] = (t[d] + step * g[d]).clamp(lo[d], hi[d]);
            }
            if cand == t {
                break;
            }
            if let Ok((fc, gc)) = lml_and_gradient(dict, &GpHyperparams::from_log(&cand), true) {
                if fc.is_finite() && fc > f {
                    accepted = Some((cand, fc, gc));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((cand, fc, gc)) = accepted else {
            break;
        };
        // Barzilai-Borwein step for the next iteration.
        let mut sy = 0.0;
        let mut ss = 0.0;
        for d in 0..P {
            let s = cand[d] - t[d];
            let y = gc[d] - g[d];
            sy += s * y;
            ss += s * s;
        }
        step = if sy < 0.0 {
            (ss / -sy).min(1e3)
        } else {
            step * 2.0
        };
        let improvement = fc - f;
        t = cand;
        f = fc;
        g = gc;
        if improvement < 1e-12 * (1.0 + f.abs()) || norm(&g) < 1e-9 {
            break;
        }
    }
    Some((GpHyperparams::from_log(&t), f))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Inserts candidates and evicts the least informative points until the
/// dictionary fits its capacity, then refreshes the factorization for `h`.
///
/// Informativeness is the Λ-scaled distance to the nearest other point. Small
/// problems are solved exactly: the retained set maximizes the minimum pairwise
/// distance, with ties broken by the next-smallest distances. Larger ones evict
/// greedily, each time removing the point of the closest pair whose removal
/// leaves the larger second-nearest distance.
pub fn update_dictionary(
    dict: &mut GpDictionary,
    candidates: &[(GpInput, f64)],
    h: &GpHyperparams,
) -> Result<()> {
    for (z, y) in candidates {
        dict.inputs.push(*z);
        dict.outputs.push(*y);
    }
    if dict.len() > dict.capacity {
        let scaled = dict.scaled_inputs();
        let keep = select_spread_subset(&scaled, &h.lambda, dict.capacity);
        dict.inputs = keep.iter().map(|&i| dict.inputs[i]).collect();
        dict.outputs = keep.iter().map(|&i| dict.outputs[i]).collect();
    }
    dict.refresh(h)
}

fn pairwise_distances(points: &[GpInput], lambda: &[f64; INPUT_DIM]) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut d = vec![vec![f64::INFINITY; n]; n];
    for i in 0..n {
        for j in 0..i {
            let v = scaled_sq_dist(&points[i], &points[j], lambda).sqrt();
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Indices (ascending) of the `capacity` points retained.
fn select_spread_subset(
    points: &[GpInput],
    lambda: &[f64; INPUT_DIM],
    capacity: usize,
) -> Vec<usize> {
    let n = points.len();
    if n <= capacity {
        return (0..n).collect();
    }
    if capacity == 0 {
        return Vec::new();
    }
    let dist = pairwise_distances(points, lambda);
    if binomial(n as u64, capacity as u64) <= EXACT_EVICTION_LIMIT {
        exact_max_min_subset(&dist, capacity)
    } else {
        greedy_eviction(&dist, capacity)
    }
}

fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = acc.saturating_mul(n - i) / (i + 1);
        if acc > EXACT_EVICTION_LIMIT * 16 {
            return u64::MAX;
        }
    }
    acc
}

fn exact_max_min_subset(dist: &[Vec<f64>], capacity: usize) -> Vec<usize> {
    struct Best {
        min: f64,
        sorted: Vec<f64>,
        set: Vec<usize>,
    }
    fn sorted_distances(dist: &[Vec<f64>], set: &[usize]) -> Vec<f64> {
        let mut d: Vec<f64> = set
            .iter()
            .enumerate()
            .flat_map(|(a, &i)| set[..a].iter().map(move |&j| dist[i][j]))
            .collect();
        d.sort_by(f64::total_cmp);
        d
    }
    fn search(
        dist: &[Vec<f64>],
        capacity: usize,
        start: usize,
        chosen: &mut Vec<usize>,
        current_min: f64,
        best: &mut Option<Best>,
    ) {
        if chosen.len() == capacity {
            let sorted = sorted_distances(dist, chosen);
            let better = match best {
                None => true,
                Some(b) => sorted
                    .iter()
                    .zip(&b.sorted)
                    .find(|(x, y)| x != y)
                    .is_some_and(|(x, y)| x > y),
            };
            if better {
                *best = Some(Best {
                    min: current_min,
                    sorted,
                    set: chosen.clone(),
                });
            }
            return;
        }
        let n = dist.len();
        if n - start < capacity - chosen.len() {
            return;
        }
        for i in start..n {
            let m = chosen
                .iter()
                .fold(current_min, |acc, &j| acc.min(dist[i][j]));
            // A subset can only get worse as points are added.
            if best.as_ref().is_some_and(|b| m < b.min) {
                continue;
            }
            chosen.push(i);
            search(dist, capacity, i + 1, chosen, m, best);
            chosen.pop();
        }
    }
    let mut best = None;
    search(
        dist,
        capacity,
        0,
        &mut Vec::with_capacity(capacity),
        f64::INFINITY,
        &mut best,
    );
    best.map(|b| b.set).unwrap_or_default()
}

fn greedy_eviction(dist: &[Vec<f64>], capacity: usize) -> Vec<usize> {
    let n = dist.len();
    let mut alive = vec![true; n];
    let mut count = n;
    while count > capacity {
        // Nearest and second-nearest live neighbours of every live point.
        let mut victim = None;
        let mut victim_key = (f64::INFINITY, f64::INFINITY);
        for i in (0..n).filter(|&i| alive[i]) {
            let (mut d1, mut d2) = (f64::INFINITY, f64::INFINITY);
            for j in (0..n).filter(|&j| alive[j] && j != i) {
                let d = dist[i][j];
                if d < d1 {
                    d2 = d1;
                    d1 = d;
                } else if d < d2 {
                    d2 = d;
                }
            }
            if d1 < victim_key.0 || (d1 == victim_key.0 && d2 < victim_key.1) {
                victim_key = (d1, d2);
                victim = Some(i);
            }
        }
        let v = victim.expect("at least two live points");
        alive[v] = false;
        count -= 1;
    }
    (0..n).filter(|&i| alive[i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualPrediction {
    pub mean: [f64; OUTPUT_DIM],
    pub var: [f64; OUTPUT_DIM],
}

/// One output dimension: dictionary plus hyperparameters.
#[derive(Debug, Clone)]
pub struct ScalarGp {
    pub dictionary: GpDictionary,
    pub hyper: GpHyperparams,
}

/// Three independent GPs for the residual of `(V, beta, r)`.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub dims: [ScalarGp; OUTPUT_DIM],
    scaler: RunningScaler,
    candidates: Vec<(GpInput, [f64; OUTPUT_DIM])>,
    fit: FitOptions,
}

impl GpModel {
    pub fn new(capacity: usize) -> Self {
        let dim = ScalarGp {
            dictionary: GpDictionary::new(capacity),
            hyper: GpHyperparams::default(),
        };
        Self {
            dims: [dim.clone(), dim.clone(), dim],
            scaler: RunningScaler::default(),
            candidates: Vec::new(),
            fit: FitOptions::default(),
        }
    }

    pub fn with_fit_options(mut self, fit: FitOptions) -> Self {
        self.fit = fit;
        self
    }

    /// True once any dimension holds training data.
    pub fn is_trained(&self) -> bool {
        self.dims.iter().any(|d| !d.dictionary.is_empty())
    }

    pub fn pending_candidates(&self) -> usize {
        self.candidates.len()
    }

    /// Buffers one transition; `nominal_next` is the nominal model's prediction.
    pub fn record_transition(
        &mut self,
        x: &State,
        u: &Control,
        x_next: &State,
        nominal_next: &State,
    ) {
        let z = gp_input(x, u);
        let y = [
            x_next.v - nominal_next.v,
            x_next.beta - nominal_next.beta,
            x_next.r - nominal_next.r,
        ];
        self.scaler.push(&z);
        self.candidates.push((z, y));
    }

    /// Moves buffered transitions into the dictionaries, refits hyperparameters
    /// when requested and refreshes every factorization.
    pub fn update<R: Rng + ?Sized>(&mut self, refit: bool, rng: &mut R) -> Result<()> {
        let scaling = self.scaler.scaling();
        let candidates = std::mem::take(&mut self.candidates);
        let first_fit = !self.is_trained();
        for (d, gp) in self.dims.iter_mut().enumerate() {
            gp.dictionary.set_scaling(scaling);
            let cands: Vec<(GpInput, f64)> = candidates.iter().map(|(z, y)| (*z, y[d])).collect();
            if first_fit && !cands.is_empty() {
                let ys: Vec<f64> = cands.iter().map(|c| c.1).collect();
                let v = output_variance(&ys).max(1e-10);
                gp.hyper = GpHyperparams {
                    sigma_f2: v,
                    sigma_w2: 0.01 * v,
                    lambda: [1.0; INPUT_DIM],
                };
            }
            update_dictionary(&mut gp.dictionary, &cands, &gp.hyper)?;
            if refit {
                gp.hyper = fit_hyperparams(&gp.dictionary, &gp.hyper, &self.fit, rng);
                gp.dictionary.refresh(&gp.hyper)?;
            }
        }
        Ok(())
    }

    pub fn predict_residual(&self, x: &State, u: &Control) -> Result<ResidualPrediction> {
        let z = gp_input(x, u);
        let mut mean = [0.0; OUTPUT_DIM];
        let mut var = [0.0; OUTPUT_DIM];
        for (d, gp) in self.dims.iter().enumerate() {
            let (m, v) = posterior(&gp.dictionary, &gp.hyper, &z)?;
            mean[d] = m;
            var[d] = v;
        }
        Ok(ResidualPrediction { mean, var })
    }

    /// Prediction plus Jacobians of mean and variance with respect to `[x; u]`.
    pub fn predict_with_jacobians(
        &self,
        x: &State,
        u: &Control,
    ) -> Result<(ResidualPrediction, ResidualJacobian, ResidualJacobian)> {
        let z = gp_input(x, u);
        let mut mean = [0.0; OUTPUT_DIM];
        let mut var = [0.0; OUTPUT_DIM];
        let mut jm = ResidualJacobian::zeros();
        let mut jv = ResidualJacobian::zeros();
        for (d, gp) in self.dims.iter().enumerate() {
            let (m, v, dm, dv) = posterior_with_gradient(&gp.dictionary, &gp.hyper, &z)?;
            mean[d] = m;
            var[d] = v;
            for k in 0..INPUT_DIM {
                jm[(d, k)] = dm[k];
                jv[(d, k)] = dv[k];
            }
        }
        Ok((ResidualPrediction { mean, var }, jm, jv))
    }

    pub fn residual_jacobians(
        &self,
        x: &State,
        u: &Control,
    ) -> Result<(ResidualJacobian, ResidualJacobian)> {
        let (_, jm, jv) = self.predict_with_jacobians(x, u)?;
        Ok((jm, jv))
    }

    pub fn to_dump(&self) -> GpDump {
        GpDump {
            dims: self
                .dims
                .iter()
                .map(|gp| GpDimDump {
                    inputs: gp.dictionary.inputs.clone(),
                    outputs: gp.dictionary.outputs.clone(),
                    capacity: gp.dictionary.capacity,
                    scaling: gp.dictionary.scaling,
                    hyperparams: gp.hyper,
                })
                .collect(),
        }
    }

    pub fn from_dump(dump: &GpDump) -> Result<Self> {
        if dump.dims.len() != OUTPUT_DIM {
            return Err(DriftError::InvalidParameter(format!(
                "GP dump has {} dimensions, expected {OUTPUT_DIM}",
                dump.dims.len()
            )));
        }
        let capacity = dump
            .dims
            .iter()
            .map(|d| d.capacity)
            .max()
            .unwrap_or(DEFAULT_CAPACITY);
        let mut model = Self::new(capacity);
        for (gp, d) in model.dims.iter_mut().zip(&dump.dims) {
            d.hyperparams.validate()?;
            gp.dictionary = GpDictionary::from_points(
                d.inputs.clone(),
                d.outputs.clone(),
                d.capacity,
                d.scaling,
            )?;
            gp.hyper = d.hyperparams;
            gp.dictionary.refresh(&gp.hyper)?;
        }
        Ok(model)
    }
}

/// JSON form of a trained model: raw inputs, outputs, scaling and
/// hyperparameters for each output dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpDump {
    pub dims: Vec<GpDimDump>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpDimDump {
    pub inputs: Vec<GpInput>,
    pub outputs: Vec<f64>,
    pub capacity: usize,
    pub scaling: InputScaling,
    pub hyperparams: GpHyperparams,
}
