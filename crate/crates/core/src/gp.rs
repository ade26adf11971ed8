//! Gaussian-process surrogate with an ARD Matérn-5/2 kernel.
//!
//! Used for the current user's model, for every stored prior-user model, and
//! for the GP-only baselines. Targets are standardized internally; all
//! predictions are reported on the original objective scale.
//!
//! Hyperparameters are fitted by maximizing the log marginal likelihood in
//! log-space with a projected gradient ascent, restarted from several seeded
//! starting points.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use ndarray::{ArrayView2, ShapeBuilder};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::{Observation, Prediction};

const SQRT5: f64 = 2.236_067_977_499_79;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Jitter ladder tried when the covariance matrix fails to factorize.
const JITTER_LADDER: [f64; 6] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// Matérn-5/2 kernel hyperparameters on the standardized target scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl KernelHyperparams {
    pub fn new(lengthscales: Vec<f64>, signal_variance: f64, noise_variance: f64) -> Result<Self> {
        if lengthscales.is_empty() {
            return Err(Error::InvalidParameter("at least one lengthscale required".into()));
        }
        if lengthscales.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::InvalidParameter("lengthscales must be positive".into()));
        }
        if !(signal_variance.is_finite() && signal_variance > 0.0) {
            return Err(Error::InvalidParameter("signal variance must be positive".into()));
        }
        if !(noise_variance.is_finite() && noise_variance >= 0.0) {
            return Err(Error::InvalidParameter("noise variance must be non-negative".into()));
        }
        Ok(Self {
            lengthscales,
            signal_variance,
            noise_variance,
        })
    }

    pub fn isotropic(dim: usize, lengthscale: f64, signal_variance: f64, noise_variance: f64) -> Result<Self> {
        Self::new(vec![lengthscale; dim], signal_variance, noise_variance)
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    fn to_log(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.lengthscales.iter().map(|l| l.ln()).collect();
        p.push(self.signal_variance.ln());
        p.push(self.noise_variance.ln());
        p
    }

    fn from_log(p: &[f64]) -> Self {
        let d = p.len() - 2;
        Self {
            lengthscales: p[..d].iter().map(|v| v.exp()).collect(),
            signal_variance: p[d].exp(),
            noise_variance: p[d + 1].exp(),
        }
    }
}

#[inline]
fn scaled_sq_dist(x1: &[f64], x2: &[f64], lengthscales: &[f64]) -> f64 {
    x1.iter()
        .zip(x2)
        .zip(lengthscales)
        .map(|((a, b), l)| {
            let d = (a - b) / l;
            d * d
        })
        .sum()
}

#[inline]
fn matern_from_r(r: f64, signal_variance: f64) -> f64 {
    let s5r = SQRT5 * r;
    signal_variance * (1.0 + s5r + s5r * s5r / 3.0) * (-s5r).exp()
}

/// Matérn-5/2 covariance between two points with per-dimension lengthscales.
pub fn matern52(x1: &[f64], x2: &[f64], hyper: &KernelHyperparams) -> Result<f64> {
    check_dim(hyper.dim(), x1.len())?;
    check_dim(hyper.dim(), x2.len())?;
    let r = scaled_sq_dist(x1, x2, &hyper.lengthscales).sqrt();
    Ok(matern_from_r(r, hyper.signal_variance))
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}

/// Kernel matrix between point sets (no noise term).
fn cross_kernel(a: &[Vec<f64>], b: &[Vec<f64>], hyper: &KernelHyperparams) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| {
        matern_from_r(scaled_sq_dist(&a[i], &b[j], &hyper.lengthscales).sqrt(), hyper.signal_variance)
    })
}

/// Settings for [`fit_gp`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpFitSettings {
    pub restarts: usize,
    pub max_iters: usize,
    pub standardize: bool,
    pub lengthscale_bounds: (f64, f64),
    pub signal_variance_bounds: (f64, f64),
    pub noise_variance_bounds: (f64, f64),
    pub initial_lengthscale: f64,
    pub initial_signal_variance: f64,
    pub initial_noise_variance: f64,
    pub seed: u64,
}

impl Default for GpFitSettings {
    fn default() -> Self {
        Self {
            restarts: 5,
            max_iters: 60,
            standardize: true,
            lengthscale_bounds: (1e-3, 10.0),
            signal_variance_bounds: (1e-4, 1e4),
            noise_variance_bounds: (1e-6, 1.0),
            initial_lengthscale: 0.5,
            initial_signal_variance: 1.0,
            initial_noise_variance: 1e-3,
            seed: 0,
        }
    }
}

impl GpFitSettings {
    fn initial_guess(&self, dim: usize) -> KernelHyperparams {
        KernelHyperparams {
            lengthscales: vec![self.initial_lengthscale; dim],
            signal_variance: self.initial_signal_variance,
            noise_variance: self.initial_noise_variance.max(self.noise_variance_bounds.0),
        }
    }

    fn log_bounds(&self, dim: usize) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![self.lengthscale_bounds.0.ln(); dim];
        let mut hi = vec![self.lengthscale_bounds.1.ln(); dim];
        lo.push(self.signal_variance_bounds.0.ln());
        hi.push(self.signal_variance_bounds.1.ln());
        lo.push(self.noise_variance_bounds.0.ln());
        hi.push(self.noise_variance_bounds.1.ln());
        (lo, hi)
    }
}

/// Cholesky factor of `K + (noise + jitter)·I` and the solve against targets.
#[derive(Clone, Debug)]
struct Factor {
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

fn factorize(x: &[Vec<f64>], ys: &DVector<f64>, hyper: &KernelHyperparams) -> Option<Factor> {
    factor_kernel(cross_kernel(x, x, hyper), ys, hyper.noise_variance)
}

/// Adds the noise diagonal and factorizes, escalating jitter on failure.
fn factor_kernel(mut k: DMatrix<f64>, ys: &DVector<f64>, noise: f64) -> Option<Factor> {
    let n = k.nrows();
    for i in 0..n {
        k[(i, i)] += noise;
    }
    let mut added = 0.0;
    for jitter in JITTER_LADDER {
        for i in 0..n {
            k[(i, i)] += jitter - added;
        }
        added = jitter;
        if let Some(chol) = Cholesky::new(k.clone()) {
            let alpha = chol.solve(ys);
            return Some(Factor { chol, alpha });
        }
    }
    None
}

/// `(L·Lᵀ)⁻¹` from the lower factor `L`. Only the lower triangle of `l` is read.
fn inverse_from_lower(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let ls = l.as_slice();
    // Columns of L⁻¹ by forward substitution, column-major throughout.
    let mut m = vec![0.0; n * n];
    for j in 0..n {
        let col = &mut m[j * n..(j + 1) * n];
        col[j] = 1.0;
        for k in j..n {
            let v = col[k] / ls[k * n + k];
            col[k] = v;
            if v != 0.0 {
                for (c, a) in col[k + 1..].iter_mut().zip(&ls[k * n + k + 1..(k + 1) * n]) {
                    *c -= v * a;
                }
            }
        }
    }
    // (L⁻¹)ᵀ·L⁻¹ as a dense product; the result is symmetric, so its
    // row-major buffer is also its column-major buffer.
    let linv = ArrayView2::from_shape((n, n).f(), &m).expect("square buffer");
    let inv = linv.t().dot(&linv);
    DMatrix::from_iterator(n, n, inv.iter().copied())
}

fn log_marginal_from(factor: &Factor, ys: &DVector<f64>) -> f64 {
    let n = ys.len() as f64;
    let l = factor.chol.l_dirty();
    let logdet_half: f64 = (0..ys.len()).map(|i| l[(i, i)].ln()).sum();
    -0.5 * ys.dot(&factor.alpha) - logdet_half - 0.5 * n * LN_2PI
}

/// Log marginal likelihood and its gradient with respect to the log-hyperparameters.
fn lml_and_grad(x: &[Vec<f64>], ys: &DVector<f64>, log_params: &[f64]) -> Option<(f64, Vec<f64>)> {
    let hyper = KernelHyperparams::from_log(log_params);
    let n = x.len();
    let d = hyper.dim();
    let sv = hyper.signal_variance;
    // Lower-triangle √5·r and exp(−√5·r), reused by the gradient.
    let mut s5 = vec![0.0; n * n];
    let mut ex = vec![0.0; n * n];
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        k[(j, j)] = sv;
        for i in j + 1..n {
            let s = SQRT5 * scaled_sq_dist(&x[i], &x[j], &hyper.lengthscales).sqrt();
            let e = (-s).exp();
            let v = sv * (1.0 + s + s * s / 3.0) * e;
            k[(i, j)] = v;
            k[(j, i)] = v;
            s5[j * n + i] = s;
            ex[j * n + i] = e;
        }
    }
    let factor = factor_kernel(k, ys, hyper.noise_variance)?;
    let lml = log_marginal_from(&factor, ys);
    if !lml.is_finite() {
        return None;
    }
    let kinv = inverse_from_lower(factor.chol.l_dirty());
    let alpha = &factor.alpha;
    let mut grad = vec![0.0; d + 2];
    let mut trace_w = 0.0;
    for j in 0..n {
        let wjj = alpha[j] * alpha[j] - kinv[(j, j)];
        trace_w += wjj;
        grad[d] += 0.5 * wjj * sv;
        for i in j + 1..n {
            // Symmetric pair (i, j) and (j, i) counted once with weight 2.
            let w = alpha[i] * alpha[j] - kinv[(i, j)];
            let (s, e) = (s5[j * n + i], ex[j * n + i]);
            grad[d] += w * sv * (1.0 + s + s * s / 3.0) * e;
            let common = w * sv * (5.0 / 3.0) * (1.0 + s) * e;
            for (c, g) in grad.iter_mut().take(d).enumerate() {
                let dc = (x[i][c] - x[j][c]) / hyper.lengthscales[c];
                *g += common * dc * dc;
            }
        }
    }
    grad[d + 1] = 0.5 * hyper.noise_variance * trace_w;
    if grad.iter().all(|g| g.is_finite()) {
        Some((lml, grad))
    } else {
        None
    }
}

/// Box-constrained maximization by projected BFGS.
///
/// Coordinates pinned at a bound with the gradient pointing outward are held
/// fixed; the quasi-Newton step acts on the rest and Armijo backtracking runs
/// along the projection arc.
fn projected_ascent<F>(f: F, start: Vec<f64>, lo: &[f64], hi: &[f64], max_iters: usize) -> Option<(Vec<f64>, f64)>
where
    F: Fn(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = start.len();
    let project = |p: &mut Vec<f64>| {
        for ((v, l), h) in p.iter_mut().zip(lo).zip(hi) {
            *v = v.clamp(*l, *h);
        }
    };
    let identity = || {
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            h[i * n + i] = 1.0;
        }
        h
    };
    let mut x = start;
    project(&mut x);
    let (mut fx, mut g) = f(&x)?;
    let mut h = identity();
    let mut fresh = true;
    let mut prev_active = vec![false; n];
    for _ in 0..max_iters {
        let active: Vec<bool> = (0..n)
            .map(|i| (x[i] <= lo[i] && g[i] < 0.0) || (x[i] >= hi[i] && g[i] > 0.0))
            .collect();
        if active != prev_active {
            h = identity();
            fresh = true;
            prev_active = active.clone();
        }
        let free_g: Vec<f64> = (0..n).map(|i| if active[i] { 0.0 } else { g[i] }).collect();
        if free_g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-8 {
            break;
        }
        let mut dir: Vec<f64> = (0..n)
            .map(|i| {
                if active[i] {
                    0.0
                } else {
                    (0..n).filter(|j| !active[*j]).map(|j| h[i * n + j] * g[j]).sum()
                }
            })
            .collect();
        if dir.iter().zip(&free_g).map(|(a, b)| a * b).sum::<f64>() <= 0.0 {
            h = identity();
            fresh = true;
            dir = free_g.clone();
        }
        // Never move more than one unit in log space per iteration.
        let longest = dir.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut accepted = None;
        let mut s = if longest > 1.0 { 1.0 / longest } else { 1.0 };
        for _ in 0..30 {
            let mut xn: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + s * b).collect();
            project(&mut xn);
            let step: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            if step.iter().map(|v| v * v).sum::<f64>() < 1e-24 {
                break;
            }
            if let Some((fnew, gnew)) = f(&xn) {
                let gain: f64 = g.iter().zip(&step).map(|(a, b)| a * b).sum();
                if fnew >= fx + 1e-4 * gain {
                    accepted = Some((xn, fnew, gnew, step));
                    break;
                }
            }
            s *= 0.5;
        }
        let Some((xn, fnew, gnew, step)) = accepted else {
            break;
        };
        // BFGS update of the inverse Hessian of −f.
        let step: Vec<f64> = (0..n).map(|i| if active[i] { 0.0 } else { step[i] }).collect();
        let yv: Vec<f64> = (0..n).map(|i| if active[i] { 0.0 } else { g[i] - gnew[i] }).collect();
        let sy: f64 = step.iter().zip(&yv).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            if fresh {
                let yy: f64 = yv.iter().map(|v| v * v).sum();
                h.iter_mut().for_each(|v| *v *= sy / yy);
                fresh = false;
            }
            let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i * n + j] * yv[j]).sum()).collect();
            let yhy: f64 = yv.iter().zip(&hy).map(|(a, b)| a * b).sum();
            let rho = 1.0 / sy;
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += rho * ((1.0 + rho * yhy) * step[i] * step[j] - hy[i] * step[j] - step[i] * hy[j]);
                }
            }
        }
        let improvement = fnew - fx;
        x = xn;
        fx = fnew;
        g = gnew;
        if improvement <= 1e-9 * (1.0 + fx.abs()) {
            break;
        }
    }
    Some((x, fx))
}

/// One user's Gaussian-process surrogate with cached factorization.
#[derive(Clone, Debug)]
pub struct GpModel {
    dim: usize,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    hyper: KernelHyperparams,
    y_mean: f64,
    y_std: f64,
    factor: Option<Factor>,
}

fn standardization(y: &[f64], standardize: bool) -> (f64, f64) {
    if !standardize || y.is_empty() {
        return (0.0, 1.0);
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    if y.len() < 2 {
        return (mean, 1.0);
    }
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > 1e-12 { std } else { 1.0 })
}

fn validate_observations(dim: usize, observations: &[Observation]) -> Result<()> {
    for o in observations {
        check_dim(dim, o.x.len())?;
        if !o.y.is_finite() {
            return Err(Error::NonFinite("objective values"));
        }
        if o.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("design points"));
        }
    }
    Ok(())
}

/// Fits a GP to `observations`, maximizing the log marginal likelihood.
///
/// With no observations this returns the zero-mean prior built from the
/// initial hyperparameter guess. A single observation keeps the initial
/// guess too: its standardized likelihood is degenerate in the signal
/// variance.
pub fn fit_gp(dim: usize, observations: &[Observation], cfg: &GpFitSettings) -> Result<GpModel> {
    validate_observations(dim, observations)?;
    let guess = cfg.initial_guess(dim);
    if observations.len() < 2 {
        return GpModel::with_hyperparams(dim, observations, guess, cfg.standardize);
    }
    let x: Vec<Vec<f64>> = observations.iter().map(|o| o.x.clone()).collect();
    let y: Vec<f64> = observations.iter().map(|o| o.y).collect();
    let (y_mean, y_std) = standardization(&y, cfg.standardize);
    let ys = DVector::from_iterator(y.len(), y.iter().map(|v| (v - y_mean) / y_std));

    let (lo, hi) = cfg.log_bounds(dim);
    let mut starts = vec![guess.to_log()];
    let mut r = rng::stream(cfg.seed);
    for _ in 1..cfg.restarts.max(1) {
        let mut p: Vec<f64> = (0..dim).map(|_| r.gen_range(0.05f64.ln()..2f64.ln())).collect();
        p.push(r.gen_range(0.1f64.ln()..10f64.ln()));
        p.push(r.gen_range(1e-6f64.ln()..1e-2f64.ln()));
        starts.push(p);
    }

    let objective = |p: &[f64]| lml_and_grad(&x, &ys, p);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for start in starts {
        if let Some((p, f)) = projected_ascent(objective, start, &lo, &hi, cfg.max_iters) {
            if best.as_ref().is_none_or(|(_, bf)| f > *bf) {
                best = Some((p, f));
            }
        }
    }
    let (p, _) = best.ok_or_else(|| Error::Factorization("no restart produced a finite likelihood".into()))?;
    let hyper = KernelHyperparams::from_log(&p);
    let factor = factorize(&x, &ys, &hyper)
        .ok_or_else(|| Error::Factorization("covariance not positive definite after jitter".into()))?;
    Ok(GpModel {
        dim,
        x,
        y,
        hyper,
        y_mean,
        y_std,
        factor: Some(factor),
    })
}

impl GpModel {
    /// Zero-mean prior with the given hyperparameters.
    pub fn prior(dim: usize, hyper: KernelHyperparams) -> Result<Self> {
        Self::with_hyperparams(dim, &[], hyper, true)
    }

    /// Conditions on `observations` with fixed hyperparameters (no fitting).
    pub fn with_hyperparams(
        dim: usize,
        observations: &[Observation],
        hyper: KernelHyperparams,
        standardize: bool,
    ) -> Result<Self> {
        check_dim(dim, hyper.dim())?;
        validate_observations(dim, observations)?;
        let x: Vec<Vec<f64>> = observations.iter().map(|o| o.x.clone()).collect();
        let y: Vec<f64> = observations.iter().map(|o| o.y).collect();
        let (y_mean, y_std) = standardization(&y, standardize);
        Self::build(dim, x, y, hyper, y_mean, y_std)
    }

    fn build(dim: usize, x: Vec<Vec<f64>>, y: Vec<f64>, hyper: KernelHyperparams, y_mean: f64, y_std: f64) -> Result<Self> {
        let factor = if x.is_empty() {
            None
        } else {
            let ys = DVector::from_iterator(y.len(), y.iter().map(|v| (v - y_mean) / y_std));
            Some(
                factorize(&x, &ys, &hyper)
                    .ok_or_else(|| Error::Factorization("covariance not positive definite after jitter".into()))?,
            )
        };
        Ok(Self {
            dim,
            x,
            y,
            hyper,
            y_mean,
            y_std,
            factor,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn hyperparams(&self) -> &KernelHyperparams {
        &self.hyper
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.x
    }

    pub fn targets(&self) -> &[f64] {
        &self.y
    }

    pub fn y_mean(&self) -> f64 {
        self.y_mean
    }

    pub fn y_std(&self) -> f64 {
        self.y_std
    }

    /// Prior variance on the objective scale.
    pub fn prior_variance(&self) -> f64 {
        self.hyper.signal_variance * self.y_std * self.y_std
    }

    /// Log marginal likelihood of the standardized targets.
    pub fn log_marginal(&self) -> Result<f64> {
        let factor = self.factor.as_ref().ok_or(Error::Empty("log marginal likelihood needs data"))?;
        let ys = DVector::from_iterator(self.y.len(), self.y.iter().map(|v| (v - self.y_mean) / self.y_std));
        Ok(log_marginal_from(factor, &ys))
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        Ok(self.predict_many(std::slice::from_ref(&x.to_vec()))?[0])
    }

    /// Posterior predictions of the latent objective at several points.
    pub fn predict_many(&self, xs: &[Vec<f64>]) -> Result<Vec<Prediction>> {
        for x in xs {
            check_dim(self.dim, x.len())?;
        }
        let sf = self.hyper.signal_variance;
        let scale2 = self.y_std * self.y_std;
        let Some(factor) = &self.factor else {
            return Ok(vec![Prediction::new(self.y_mean, sf * scale2); xs.len()]);
        };
        let kstar = cross_kernel(&self.x, xs, &self.hyper);
        let mean_s = kstar.tr_mul(&factor.alpha);
        let mut v = kstar;
        if !factor.chol.l_dirty().solve_lower_triangular_mut(&mut v) {
            return Err(Error::Factorization("singular triangular factor".into()));
        }
        Ok((0..xs.len())
            .map(|j| {
                let col = v.column(j);
                let var_s = (sf - col.dot(&col)).max(0.0);
                Prediction::new(self.y_mean + self.y_std * mean_s[j], var_s * scale2)
            })
            .collect())
    }

    pub fn to_record(&self) -> GpRecord {
        GpRecord {
            x: self.x.clone(),
            y: self.y.clone(),
            lengthscales: self.hyper.lengthscales.clone(),
            signal_variance: self.hyper.signal_variance,
            noise_variance: self.hyper.noise_variance,
            y_mean: self.y_mean,
            y_std: self.y_std,
        }
    }

    /// Rebuilds a model, including its factorization caches, from a record.
    pub fn from_record(record: &GpRecord) -> Result<Self> {
        let hyper = KernelHyperparams::new(
            record.lengthscales.clone(),
            record.signal_variance,
            record.noise_variance,
        )?;
        let dim = hyper.dim();
        if record.x.len() != record.y.len() {
            return Err(Error::State(format!(
                "GP record has {} inputs but {} targets",
                record.x.len(),
                record.y.len()
            )));
        }
        for x in &record.x {
            check_dim(dim, x.len())?;
        }
        if !(record.y_std.is_finite() && record.y_std > 0.0 && record.y_mean.is_finite()) {
            return Err(Error::State("GP record has invalid standardization".into()));
        }
        Self::build(dim, record.x.clone(), record.y.clone(), hyper, record.y_mean, record.y_std)
    }
}

/// Serialized form of a [`GpModel`]. Caches are rebuilt on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpRecord {
    #[serde(rename = "X")]
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
    pub y_mean: f64,
    pub y_std: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn obs(x: &[f64], y: f64) -> Observation {
        Observation::new(x.to_vec(), y)
    }

    fn random_dataset(seed: u64, n: usize) -> Vec<Observation> {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x = vec![r.gen::<f64>(), r.gen::<f64>()];
                let y = (3.0 * x[0]).sin() + x[1] * x[1] + 0.1 * r.gen::<f64>();
                obs(&x, y)
            })
            .collect()
    }

    /// Dense-formula oracle: explicit inverse via LU, no cached factorization.
    fn dense_posterior(data: &[Observation], hyper: &KernelHyperparams, x: &[f64]) -> (f64, f64) {
        let n = data.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                k[(i, j)] = matern52(&data[i].x, &data[j].x, hyper).unwrap();
            }
            k[(i, i)] += hyper.noise_variance;
        }
        let kinv = k.try_inverse().unwrap();
        let y = DVector::from_iterator(n, data.iter().map(|o| o.y));
        let ks = DVector::from_iterator(n, data.iter().map(|o| matern52(&o.x, x, hyper).unwrap()));
        let mean = ks.dot(&(&kinv * &y));
        let var = hyper.signal_variance - ks.dot(&(&kinv * &ks));
        (mean, var)
    }

    fn dense_lml(data: &[Observation], hyper: &KernelHyperparams) -> f64 {
        let n = data.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                k[(i, j)] = matern52(&data[i].x, &data[j].x, hyper).unwrap();
            }
            k[(i, i)] += hyper.noise_variance;
        }
        let y = DVector::from_iterator(n, data.iter().map(|o| o.y));
        let det = k.clone().lu().determinant();
        let kinv = k.try_inverse().unwrap();
        -0.5 * y.dot(&(&kinv * &y)) - 0.5 * det.ln() - 0.5 * n as f64 * LN_2PI
    }

    #[test]
    fn kernel_at_zero_distance_is_signal_variance() {
        let h = KernelHyperparams::new(vec![0.3, 2.0], 1.7, 0.0).unwrap();
        assert_eq!(matern52(&[0.2, 0.9], &[0.2, 0.9], &h).unwrap(), 1.7);
    }

    #[test]
    fn kernel_decays_with_distance() {
        let h = KernelHyperparams::isotropic(2, 1.0, 1.0, 0.0).unwrap();
        assert!(matern52(&[0.0, 0.0], &[1e3, 0.0], &h).unwrap() < 1e-300);
    }

    #[test]
    fn triangular_inverse_matches_dense_inverse() {
        let x: Vec<Vec<f64>> = random_dataset(4, 25).into_iter().map(|o| o.x).collect();
        let hyper = KernelHyperparams::isotropic(2, 0.4, 1.3, 1e-2).unwrap();
        let mut k = cross_kernel(&x, &x, &hyper);
        for i in 0..x.len() {
            k[(i, i)] += hyper.noise_variance;
        }
        let chol = Cholesky::new(k.clone()).unwrap();
        let dense = k.try_inverse().unwrap();
        let fast = inverse_from_lower(chol.l_dirty());
        assert!((fast - dense).abs().max() < 1e-8);
    }

    #[test]
    fn kernel_unit_distance_value() {
        // (1 + √5 + 5/3)·exp(−√5) evaluated independently with mpmath: 0.523994...
        let h = KernelHyperparams::isotropic(2, 1.0, 1.0, 0.0).unwrap();
        let k = matern52(&[0.0, 0.0], &[0.6, 0.8], &h).unwrap();
        assert!((k - 0.523_994_1).abs() < 1e-6, "{k}");
    }

    #[test]
    fn kernel_rejects_dimension_mismatch() {
        let h = KernelHyperparams::isotropic(2, 1.0, 1.0, 0.0).unwrap();
        assert!(matches!(
            matern52(&[0.0, 0.0, 0.0], &[0.0, 0.0], &h),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn empty_fit_is_zero_mean_prior() {
        let m = fit_gp(2, &[], &GpFitSettings::default()).unwrap();
        let p = m.predict(&[0.3, 0.7]).unwrap();
        assert_eq!(p.mean, 0.0);
        assert_eq!(p.variance, GpFitSettings::default().initial_signal_variance);
        assert!(matches!(m.log_marginal(), Err(Error::Empty(_))));
    }

    #[test]
    fn single_observation_is_interpolated() {
        let cfg = GpFitSettings {
            initial_noise_variance: 1e-6,
            ..GpFitSettings::default()
        };
        let m = fit_gp(2, &[obs(&[0.5, 0.5], 2.0)], &cfg).unwrap();
        let p = m.predict(&[0.5, 0.5]).unwrap();
        assert!((p.mean - 2.0).abs() < 1e-3);
    }

    #[test]
    fn single_observation_matches_dense_oracle_without_standardization() {
        let h = KernelHyperparams::isotropic(2, 0.5, 1.0, 1e-6).unwrap();
        let data = [obs(&[0.5, 0.5], 2.0)];
        let m = GpModel::with_hyperparams(2, &data, h.clone(), false).unwrap();
        let (mean, _) = dense_posterior(&data, &h, &[0.5, 0.5]);
        assert!((m.predict(&[0.5, 0.5]).unwrap().mean - mean).abs() < 1e-12);
        assert!((mean - 2.0).abs() < 1e-3);
    }

    #[test]
    fn non_finite_targets_are_rejected() {
        let r = fit_gp(2, &[obs(&[0.1, 0.1], f64::NAN)], &GpFitSettings::default());
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn lml_collapses_for_unit_system() {
        let h = KernelHyperparams::isotropic(2, 1.0, 1.0 - 1e-12, 1e-12).unwrap();
        let m = GpModel::with_hyperparams(2, &[obs(&[0.0, 0.0], 0.0)], h, false).unwrap();
        assert!((m.log_marginal().unwrap() + 0.918_938_533).abs() < 1e-8);
    }

    #[test]
    fn lml_matches_dense_oracle() {
        let h = KernelHyperparams::new(vec![0.3, 0.6], 1.3, 1e-3).unwrap();
        for seed in 0..20 {
            let data = random_dataset(seed, 1 + seed as usize);
            let m = GpModel::with_hyperparams(2, &data, h.clone(), false).unwrap();
            let got = m.log_marginal().unwrap();
            let want = dense_lml(&data, &h);
            assert!((got - want).abs() < 1e-8, "seed {seed}: {got} vs {want}");
        }
    }

    #[test]
    fn duplicate_observation_keeps_lml_finite() {
        let mut data = random_dataset(4, 6);
        let h = KernelHyperparams::isotropic(2, 0.4, 1.0, 1e-6).unwrap();
        let before = GpModel::with_hyperparams(2, &data, h.clone(), false).unwrap().log_marginal().unwrap();
        data.push(data[2].clone());
        let after = GpModel::with_hyperparams(2, &data, h, false).unwrap().log_marginal().unwrap();
        assert!(before.is_finite() && after.is_finite());
    }

    #[test]
    fn analytic_lml_gradient_matches_finite_differences() {
        let data = random_dataset(11, 9);
        let x: Vec<Vec<f64>> = data.iter().map(|o| o.x.clone()).collect();
        let ys = DVector::from_iterator(9, data.iter().map(|o| o.y));
        let p = vec![(0.3f64).ln(), (0.7f64).ln(), (1.2f64).ln(), (1e-2f64).ln()];
        let (_, g) = lml_and_grad(&x, &ys, &p).unwrap();
        for k in 0..p.len() {
            let h = 1e-5;
            let mut pp = p.clone();
            pp[k] += h;
            let mut pm = p.clone();
            pm[k] -= h;
            let fd = (lml_and_grad(&x, &ys, &pp).unwrap().0 - lml_and_grad(&x, &ys, &pm).unwrap().0) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-5 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn fitted_lml_not_below_initial_guess() {
        let cfg = GpFitSettings::default();
        for seed in 0..8 {
            let data = random_dataset(100 + seed, 3 + 2 * seed as usize);
            let fitted = fit_gp(2, &data, &cfg).unwrap();
            let start = GpModel::with_hyperparams(2, &data, cfg.initial_guess(2), true).unwrap();
            assert!(fitted.log_marginal().unwrap() >= start.log_marginal().unwrap() - 1e-12);
        }
    }

    #[test]
    fn fitted_hyperparams_respect_bounds() {
        let cfg = GpFitSettings::default();
        let m = fit_gp(2, &random_dataset(9, 15), &cfg).unwrap();
        let h = m.hyperparams();
        for l in &h.lengthscales {
            assert!(*l >= 1e-3 * (1.0 - 1e-12) && *l <= 10.0 * (1.0 + 1e-12));
        }
        assert!(h.noise_variance >= 1e-6 * (1.0 - 1e-12));
    }

    #[test]
    fn far_predictions_revert_to_prior() {
        let h = KernelHyperparams::isotropic(2, 0.1, 1.0, 1e-6).unwrap();
        let m = GpModel::with_hyperparams(2, &random_dataset(1, 10), h, false).unwrap();
        let p = m.predict(&[50.0, -50.0]).unwrap();
        assert!(p.mean.abs() < 1e-6);
        assert!((p.variance - 1.0).abs() < 1e-6);
    }

    #[test]
    fn record_round_trip_reproduces_predictions() {
        let m = fit_gp(2, &random_dataset(5, 12), &GpFitSettings::default()).unwrap();
        let json = serde_json::to_string(&m.to_record()).unwrap();
        let back = GpModel::from_record(&serde_json::from_str(&json).unwrap()).unwrap();
        for x in [[0.1, 0.2], [0.9, 0.4]] {
            assert_eq!(m.predict(&x).unwrap(), back.predict(&x).unwrap());
        }
        assert!(json.contains("\"X\""));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn cached_posterior_matches_dense_formula(seed in 0u64..10_000, n in 1usize..=20, qx in 0.0f64..1.0, qy in 0.0f64..1.0) {
            let h = KernelHyperparams::new(vec![0.25, 0.5], 1.5, 1e-4).unwrap();
            let data = random_dataset(seed, n);
            let m = GpModel::with_hyperparams(2, &data, h.clone(), false).unwrap();
            let p = m.predict(&[qx, qy]).unwrap();
            let (mean, var) = dense_posterior(&data, &h, &[qx, qy]);
            prop_assert!((p.mean - mean).abs() < 1e-8);
            prop_assert!((p.variance - var.max(0.0)).abs() < 1e-8);
            prop_assert!(p.variance >= 0.0 && p.variance <= h.signal_variance + 1e-8);
        }

        #[test]
        fn predictions_ignore_observation_order(seed in 0u64..10_000, n in 2usize..=15) {
            let h = KernelHyperparams::new(vec![0.3, 0.3], 1.0, 1e-4).unwrap();
            let data = random_dataset(seed, n);
            let mut rev = data.clone();
            rev.reverse();
            let a = GpModel::with_hyperparams(2, &data, h.clone(), true).unwrap();
            let b = GpModel::with_hyperparams(2, &rev, h, true).unwrap();
            for q in [[0.2, 0.8], [0.5, 0.5]] {
                let (pa, pb) = (a.predict(&q).unwrap(), b.predict(&q).unwrap());
                prop_assert!((pa.mean - pb.mean).abs() < 1e-7);
                prop_assert!((pa.variance - pb.variance).abs() < 1e-7);
            }
        }

        #[test]
        fn gram_matrices_factorize_with_small_jitter(seed in 0u64..10_000, n in 1usize..30) {
            let h = KernelHyperparams::new(vec![0.2, 0.9], 2.0, 0.0).unwrap();
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec<f64>> = (0..n).map(|_| vec![r.gen(), r.gen()]).collect();
            let mut k = cross_kernel(&pts, &pts, &h);
            for i in 0..n {
                prop_assert!((k[(i, i)] - 2.0).abs() < 1e-15);
                for j in 0..n {
                    prop_assert_eq!(k[(i, j)], k[(j, i)]);
                }
                k[(i, i)] += 1e-6;
            }
            prop_assert!(Cholesky::new(k).is_some());
        }
    }
}
