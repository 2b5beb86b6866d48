//! Full-covariance Gaussian mixtures.
//!
//! Every fitted [`GmmModel`] carries per-component sufficient statistics
//! `S0 = Σ γ`, `S1 = Σ γ x` and `S2 = Σ γ x xᵀ`, and its parameters are always
//! derived from them (`π = S0/ΣS0`, `μ = S1/S0`, `Σ = S2/S0 − μμᵀ + εI`).
//! Absorbing one more point is then an exact M-step over all points with the
//! earlier responsibilities held fixed, which is what [`incremental_update`]
//! does in O(K·d²).

use std::collections::BTreeSet;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::mix_seed;

pub const DEFAULT_REG_EPS: f64 = 1e-6;

/// Components whose total responsibility falls below this are dropped.
const EMPTY_MASS: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GmmError {
    #[error("cannot fit {k} components to {n} points")]
    TooFewPoints { n: usize, k: usize },
    #[error("no points given")]
    Empty,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("invalid argument: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub n_init: usize,
    pub reg_eps: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { max_iter: 200, tol: 1e-4, n_init: 3, reg_eps: DEFAULT_REG_EPS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub k: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Row-major `dim × dim` matrices, ridge included.
    pub covariances: Vec<Vec<f64>>,
    pub suff_s0: Vec<f64>,
    pub suff_s1: Vec<Vec<f64>>,
    /// Row-major `dim × dim` matrices.
    pub suff_s2: Vec<Vec<f64>>,
    /// Number of points absorbed.
    pub n: usize,
    pub reg_eps: f64,
}

/// Lower Cholesky factor of a row-major symmetric matrix.
fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for p in 0..j {
                s -= l[i * d + p] * l[j * d + p];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// A Gaussian with its factorization cached.
#[derive(Debug, Clone)]
struct Factored {
    mean: Vec<f64>,
    chol: Vec<f64>,
    log_norm: f64,
}

impl Factored {
    fn new(mean: &[f64], cov: &[f64]) -> Result<Self, GmmError> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(GmmError::Dimension { expected: d * d, got: cov.len() });
        }
        let chol = cholesky(cov, d).ok_or(GmmError::NotPositiveDefinite)?;
        let log_det_half: f64 = (0..d).map(|i| chol[i * d + i].ln()).sum();
        Ok(Self { mean: mean.to_vec(), chol, log_norm: -0.5 * d as f64 * LN_2PI - log_det_half })
    }

    fn logpdf(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        let d = self.mean.len();
        // forward substitution L y = x - μ
        let mut q = 0.0;
        for i in 0..d {
            let mut s = x[i] - self.mean[i];
            for j in 0..i {
                s -= self.chol[i * d + j] * scratch[j];
            }
            let y = s / self.chol[i * d + i];
            scratch[i] = y;
            q += y * y;
        }
        self.log_norm - 0.5 * q
    }
}

/// `ln N(x | μ, Σ)` for a row-major covariance.
pub fn gaussian_logpdf(x: &[f64], mu: &[f64], sigma: &[f64]) -> Result<f64, GmmError> {
    if x.len() != mu.len() {
        return Err(GmmError::Dimension { expected: mu.len(), got: x.len() });
    }
    let f = Factored::new(mu, sigma)?;
    let mut scratch = vec![0.0; mu.len()];
    Ok(f.logpdf(x, &mut scratch))
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Cached factorizations of all components for repeated evaluation.
struct Mixture<'a> {
    model: &'a GmmModel,
    comps: Vec<Factored>,
    log_w: Vec<f64>,
}

impl<'a> Mixture<'a> {
    fn new(model: &'a GmmModel) -> Result<Self, GmmError> {
        let comps = (0..model.k)
            .map(|c| Factored::new(&model.means[c], &model.covariances[c]))
            .collect::<Result<Vec<_>, _>>()?;
        let log_w = model.weights.iter().map(|w| if *w > 0.0 { w.ln() } else { f64::NEG_INFINITY }).collect();
        Ok(Self { model, comps, log_w })
    }

    /// Responsibilities of `x` written into `out`; returns `ln p(x)`.
    fn posterior(&self, x: &[f64], out: &mut [f64], scratch: &mut [f64]) -> f64 {
        for c in 0..self.model.k {
            out[c] = if self.log_w[c] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                self.log_w[c] + self.comps[c].logpdf(x, scratch)
            };
        }
        let lse = log_sum_exp(out);
        for o in out.iter_mut() {
            *o = (*o - lse).exp();
        }
        lse
    }

    /// E-step over a batch: responsibilities (row-major n×K) and total log-likelihood.
    fn e_step(&self, points: &[Vec<f64>]) -> (Vec<f64>, f64) {
        let k = self.model.k;
        let mut gamma = vec![0.0; points.len() * k];
        let mut scratch = vec![0.0; self.model.dim];
        let mut ll = 0.0;
        for (i, x) in points.iter().enumerate() {
            ll += self.posterior(x, &mut gamma[i * k..(i + 1) * k], &mut scratch);
        }
        (gamma, ll)
    }
}

/// Accumulates sufficient statistics from a row-major n×K responsibility matrix.
fn accumulate(points: &[Vec<f64>], gamma: &[f64], k: usize, d: usize) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut s0 = vec![0.0; k];
    let mut s1 = vec![vec![0.0; d]; k];
    let mut s2 = vec![vec![0.0; d * d]; k];
    for (i, x) in points.iter().enumerate() {
        for c in 0..k {
            let g = gamma[i * k + c];
            if g == 0.0 {
                continue;
            }
            s0[c] += g;
            for a in 0..d {
                let gx = g * x[a];
                s1[c][a] += gx;
                for b in 0..=a {
                    s2[c][a * d + b] += gx * x[b];
                }
            }
        }
    }
    for m in s2.iter_mut() {
        for a in 0..d {
            for b in 0..a {
                m[b * d + a] = m[a * d + b];
            }
        }
    }
    (s0, s1, s2)
}

/// Projects a symmetric matrix onto the PSD cone by clamping eigenvalues at zero.
fn clamp_psd(m: &mut [f64], d: usize) {
    let mat = DMatrix::from_row_slice(d, d, m);
    let eig = SymmetricEigen::new(mat);
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    for a in 0..d {
        for b in 0..d {
            m[a * d + b] = 0.5 * (rebuilt[(a, b)] + rebuilt[(b, a)]);
        }
    }
}

impl GmmModel {
    /// Derives parameters from sufficient statistics. Components with
    /// (near) zero mass keep the mean/covariance of `fallback` when given.
    pub fn from_stats(
        s0: Vec<f64>,
        s1: Vec<Vec<f64>>,
        s2: Vec<Vec<f64>>,
        n: usize,
        reg_eps: f64,
        fallback: Option<&GmmModel>,
    ) -> GmmModel {
        let k = s0.len();
        let d = s1.first().map_or(0, |v| v.len());
        let total: f64 = s0.iter().sum();
        let mut weights = Vec::with_capacity(k);
        let mut means = Vec::with_capacity(k);
        let mut covariances = Vec::with_capacity(k);
        for c in 0..k {
            weights.push(if total > 0.0 { s0[c] / total } else { 1.0 / k as f64 });
            if s0[c] <= EMPTY_MASS {
                let (m, cov) = match fallback.filter(|f| c < f.k) {
                    Some(f) => (f.means[c].clone(), f.covariances[c].clone()),
                    None => {
                        let mut id = vec![0.0; d * d];
                        (0..d).for_each(|i| id[i * d + i] = 1.0);
                        (vec![0.0; d], id)
                    }
                };
                means.push(m);
                covariances.push(cov);
                continue;
            }
            let mu: Vec<f64> = s1[c].iter().map(|v| v / s0[c]).collect();
            let mut cov = vec![0.0; d * d];
            for a in 0..d {
                for b in 0..=a {
                    let v = s2[c][a * d + b] / s0[c] - mu[a] * mu[b];
                    cov[a * d + b] = v;
                    cov[b * d + a] = v;
                }
            }
            for a in 0..d {
                cov[a * d + a] += reg_eps;
            }
            if cholesky(&cov, d).is_none() {
                (0..d).for_each(|a| cov[a * d + a] -= reg_eps);
                clamp_psd(&mut cov, d);
                (0..d).for_each(|a| cov[a * d + a] += reg_eps);
            }
            means.push(mu);
            covariances.push(cov);
        }
        GmmModel { k, dim: d, weights, means, covariances, suff_s0: s0, suff_s1: s1, suff_s2: s2, n, reg_eps }
    }

    /// Exact M-step from a row-major n×K responsibility matrix, stats included.
    pub fn from_responsibilities(points: &[Vec<f64>], gamma: &[f64], k: usize, reg_eps: f64) -> GmmModel {
        let d = points.first().map_or(0, |p| p.len());
        let (s0, s1, s2) = accumulate(points, gamma, k, d);
        let mut model = GmmModel::from_stats(s0, s1, s2, points.len(), reg_eps, None);
        // two-pass moments avoid the cancellation in S2/S0 - μμᵀ far from the origin
        let rows: Vec<Vec<f64>> = gamma.chunks(k.max(1)).map(<[f64]>::to_vec).collect();
        if let Ok(exact) = m_step(points, &rows, reg_eps) {
            for c in 0..k {
                if model.suff_s0[c] > EMPTY_MASS && !exact.empty.contains(&c) && cholesky(&exact.covariances[c], d).is_some() {
                    model.means[c] = exact.means[c].clone();
                    model.covariances[c] = exact.covariances[c].clone();
                }
            }
        }
        model
    }

    pub fn validate(&self) -> Result<(), GmmError> {
        let k = self.k;
        let d = self.dim;
        let shapes_ok = self.weights.len() == k
            && self.means.len() == k
            && self.covariances.len() == k
            && self.suff_s0.len() == k
            && self.suff_s1.len() == k
            && self.suff_s2.len() == k
            && self.means.iter().all(|m| m.len() == d)
            && self.suff_s1.iter().all(|m| m.len() == d)
            && self.covariances.iter().all(|m| m.len() == d * d)
            && self.suff_s2.iter().all(|m| m.len() == d * d);
        if !shapes_ok {
            return Err(GmmError::Invalid("inconsistent component shapes".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|w| *w < 0.0 || !w.is_finite()) || (k > 0 && (total - 1.0).abs() > 1e-9) {
            return Err(GmmError::Invalid("weights must be a probability vector".into()));
        }
        Mixture::new(self).map(|_| ())
    }

    pub fn log_likelihood(&self, points: &[Vec<f64>]) -> Result<f64, GmmError> {
        let mix = Mixture::new(self)?;
        Ok(mix.e_step(points).1)
    }

    /// Responsibilities for a batch, one row per point.
    pub fn predict_proba(&self, points: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, GmmError> {
        let mix = Mixture::new(self)?;
        let (gamma, _) = mix.e_step(points);
        Ok(gamma.chunks(self.k.max(1)).map(|r| r.to_vec()).collect())
    }

    pub fn argmax(&self, x: &[f64]) -> Result<usize, GmmError> {
        let g = responsibilities(self, x)?;
        Ok(argmax(&g))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Posterior component probabilities of `x`, computed in log space.
pub fn responsibilities(model: &GmmModel, x: &[f64]) -> Result<Vec<f64>, GmmError> {
    if x.len() != model.dim {
        return Err(GmmError::Dimension { expected: model.dim, got: x.len() });
    }
    let mix = Mixture::new(model)?;
    let mut out = vec![0.0; model.k];
    let mut scratch = vec![0.0; model.dim];
    mix.posterior(x, &mut out, &mut scratch);
    Ok(out)
}

/// Parameters produced by one M-step.
#[derive(Debug, Clone, PartialEq)]
pub struct MStep {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<f64>>,
    /// Components whose total responsibility was below 1e-12.
    pub empty: Vec<usize>,
}

/// Weighted-moment M-step: `π = Σγ/n`, `μ = Σγx/Σγ`, `Σ = Σγ(x−μ)(x−μ)ᵀ/Σγ + εI`.
/// `gamma` has one row per point.
pub fn m_step(points: &[Vec<f64>], gamma: &[Vec<f64>], reg_eps: f64) -> Result<MStep, GmmError> {
    let n = points.len();
    if n == 0 {
        return Err(GmmError::Empty);
    }
    if gamma.len() != n {
        return Err(GmmError::Dimension { expected: n, got: gamma.len() });
    }
    let k = gamma[0].len();
    let d = points[0].len();
    let mut out = MStep { weights: vec![0.0; k], means: vec![vec![0.0; d]; k], covariances: vec![vec![0.0; d * d]; k], empty: Vec::new() };
    for c in 0..k {
        let nk: f64 = gamma.iter().map(|g| g[c]).sum();
        out.weights[c] = nk / n as f64;
        if nk < EMPTY_MASS {
            out.empty.push(c);
            continue;
        }
        let mut mu = vec![0.0; d];
        for (x, g) in points.iter().zip(gamma) {
            for a in 0..d {
                mu[a] += g[c] * x[a];
            }
        }
        mu.iter_mut().for_each(|m| *m /= nk);
        let cov = &mut out.covariances[c];
        for (x, g) in points.iter().zip(gamma) {
            for a in 0..d {
                for b in 0..d {
                    cov[a * d + b] += g[c] * (x[a] - mu[a]) * (x[b] - mu[b]);
                }
            }
        }
        cov.iter_mut().for_each(|v| *v /= nk);
        for a in 0..d {
            cov[a * d + a] += reg_eps;
        }
        out.means[c] = mu;
    }
    Ok(out)
}

/// Number of free parameters of a full-covariance mixture.
pub fn n_parameters(k: usize, d: usize) -> usize {
    k * (d + d * (d + 1) / 2) + k.saturating_sub(1)
}

/// Bayesian information criterion, `p ln n − 2 ln L`; lower is better.
pub fn bic(model: &GmmModel, points: &[Vec<f64>]) -> Result<f64, GmmError> {
    let ll = model.log_likelihood(points)?;
    Ok(n_parameters(model.k, model.dim) as f64 * (points.len() as f64).ln() - 2.0 * ll)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub model: GmmModel,
    pub log_likelihood: f64,
    /// Log-likelihood at every E-step of the winning run.
    pub trace: Vec<f64>,
    pub n_iter: usize,
    pub converged: bool,
}

fn check_points(points: &[Vec<f64>]) -> Result<usize, GmmError> {
    let d = points.first().ok_or(GmmError::Empty)?.len();
    if let Some(p) = points.iter().find(|p| p.len() != d) {
        return Err(GmmError::Dimension { expected: d, got: p.len() });
    }
    Ok(d)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by a hard assignment to the nearest seed.
fn kmeanspp_init(points: &[Vec<f64>], k: usize, reg_eps: f64, rng: &mut ChaCha8Rng) -> GmmModel {
    let n = points.len();
    let mut centers: Vec<usize> = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[centers[0]])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if *w <= 0.0 {
                    continue;
                }
                if r < *w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        };
        centers.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[next]));
        }
    }
    let mut gamma = vec![0.0; n * k];
    for (i, p) in points.iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, &ci) in centers.iter().enumerate() {
            let dd = sq_dist(p, &points[ci]);
            if dd < best_d {
                best_d = dd;
                best = c;
            }
        }
        gamma[i * k + best] = 1.0;
    }
    let model = GmmModel::from_responsibilities(points, &gamma, k, reg_eps);
    drop_empty(model).0
}

/// Removes components with (near) zero mass; returns the kept original indices.
fn drop_empty(model: GmmModel) -> (GmmModel, Vec<usize>) {
    let kept: Vec<usize> = (0..model.k).filter(|&c| model.suff_s0[c] > EMPTY_MASS).collect();
    if kept.len() == model.k {
        return (model, kept);
    }
    let pick = |v: &Vec<Vec<f64>>| kept.iter().map(|&c| v[c].clone()).collect::<Vec<_>>();
    let s0 = kept.iter().map(|&c| model.suff_s0[c]).collect();
    let rebuilt = GmmModel::from_stats(s0, pick(&model.suff_s1), pick(&model.suff_s2), model.n, model.reg_eps, None);
    (rebuilt, kept)
}

/// Runs EM from `init` until the log-likelihood change drops below `tol`.
/// Returns the fit and, for each final component, its index in `init`.
pub fn refine_em(init: &GmmModel, points: &[Vec<f64>], opts: &EmOptions) -> Result<(EmFit, Vec<usize>), GmmError> {
    let d = check_points(points)?;
    if d != init.dim {
        return Err(GmmError::Dimension { expected: init.dim, got: d });
    }
    let mut model = init.clone();
    let mut kept: Vec<usize> = (0..model.k).collect();
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut n_iter = 0;
    loop {
        let mix = Mixture::new(&model)?;
        let (gamma, ll) = mix.e_step(points);
        if let Some(prev) = trace.last() {
            if (ll - prev).abs() < opts.tol {
                converged = true;
            }
        }
        trace.push(ll);
        let next = GmmModel::from_responsibilities(points, &gamma, model.k, opts.reg_eps);
        let (next, kept_now) = drop_empty(next);
        kept = kept_now.iter().map(|&c| kept[c]).collect();
        model = next;
        if converged || n_iter >= opts.max_iter {
            break;
        }
        n_iter += 1;
    }
    let log_likelihood = model.log_likelihood(points)?;
    Ok((EmFit { model, log_likelihood, trace, n_iter, converged }, kept))
}

/// Fits a `k`-component mixture, keeping the best of `n_init` seeded restarts.
pub fn fit_em(points: &[Vec<f64>], k: usize, opts: &EmOptions, seed: u64) -> Result<EmFit, GmmError> {
    check_points(points)?;
    if k == 0 {
        return Err(GmmError::Invalid("k must be at least 1".into()));
    }
    if points.len() < k {
        return Err(GmmError::TooFewPoints { n: points.len(), k });
    }
    let restarts = if k == 1 { 1 } else { opts.n_init.max(1) };
    let mut best: Option<EmFit> = None;
    for r in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, r as u64));
        let init = kmeanspp_init(points, k, opts.reg_eps, &mut rng);
        let (fit, _) = refine_em(&init, points, opts)?;
        if best.as_ref().is_none_or(|b| fit.log_likelihood > b.log_likelihood) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestK {
    pub model: GmmModel,
    /// `(requested k, bic)` for every candidate evaluated.
    pub scores: Vec<(usize, f64)>,
}

/// Fits every `k` in `[k_min, min(k_max, n)]` and keeps the BIC minimizer
/// (smaller `k` on ties). Candidates are fitted in parallel with per-`k` seeds.
pub fn fit_best_k(points: &[Vec<f64>], k_min: usize, k_max: usize, opts: &EmOptions, seed: u64) -> Result<BestK, GmmError> {
    check_points(points)?;
    let k_min = k_min.max(1);
    let hi = k_max.min(points.len());
    if hi < k_min {
        return Err(GmmError::TooFewPoints { n: points.len(), k: k_min });
    }
    let fits: Vec<(usize, EmFit, f64)> = (k_min..=hi)
        .into_par_iter()
        .map(|k| {
            let fit = fit_em(points, k, opts, mix_seed(seed, 0x6b00 + k as u64))?;
            let score = bic(&fit.model, points)?;
            Ok((k, fit, score))
        })
        .collect::<Result<Vec<_>, GmmError>>()?;
    let scores = fits.iter().map(|(k, _, s)| (*k, *s)).collect();
    let (_, fit, _) = fits
        .into_iter()
        .reduce(|a, b| if b.2 < a.2 { b } else { a })
        .expect("non-empty scan");
    Ok(BestK { model: fit.model, scores })
}

/// Absorbs `x` into the statistics with its current responsibilities and
/// re-derives all parameters. Returns the new model and the responsibilities used.
pub fn incremental_update(model: &GmmModel, x: &[f64]) -> Result<(GmmModel, Vec<f64>), GmmError> {
    let gamma = responsibilities(model, x)?;
    let d = model.dim;
    let mut s0 = model.suff_s0.clone();
    let mut s1 = model.suff_s1.clone();
    let mut s2 = model.suff_s2.clone();
    for c in 0..model.k {
        let g = gamma[c];
        if g == 0.0 {
            continue;
        }
        s0[c] += g;
        for a in 0..d {
            s1[c][a] += g * x[a];
            for b in 0..d {
                s2[c][a * d + b] += g * x[a] * x[b];
            }
        }
    }
    let updated = GmmModel::from_stats(s0, s1, s2, model.n + 1, model.reg_eps, Some(model));
    Ok((updated, gamma))
}

/// Removes the contribution of `x` using its responsibilities under the
/// current parameters. Components whose mass would go negative are emptied.
pub fn decremental_update(model: &GmmModel, x: &[f64]) -> Result<(GmmModel, Vec<f64>), GmmError> {
    let gamma = responsibilities(model, x)?;
    let d = model.dim;
    let mut s0 = model.suff_s0.clone();
    let mut s1 = model.suff_s1.clone();
    let mut s2 = model.suff_s2.clone();
    for c in 0..model.k {
        let g = gamma[c];
        if g == 0.0 {
            continue;
        }
        if s0[c] - g <= EMPTY_MASS {
            s0[c] = 0.0;
            s1[c].iter_mut().for_each(|v| *v = 0.0);
            s2[c].iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        s0[c] -= g;
        for a in 0..d {
            s1[c][a] -= g * x[a];
            for b in 0..d {
                s2[c][a * d + b] -= g * x[a] * x[b];
            }
        }
    }
    let updated = GmmModel::from_stats(s0, s1, s2, model.n.saturating_sub(1), model.reg_eps, Some(model));
    Ok((updated, gamma))
}

/// Components whose responsibility for `x` exceeds `threshold`; the argmax if none does.
pub fn soft_assign(model: &GmmModel, x: &[f64], threshold: f64) -> Result<Vec<usize>, GmmError> {
    Ok(assign_from_gamma(&responsibilities(model, x)?, threshold))
}

pub fn assign_from_gamma(gamma: &[f64], threshold: f64) -> Vec<usize> {
    let picked: Vec<usize> = (0..gamma.len()).filter(|&c| gamma[c] > threshold).collect();
    if picked.is_empty() {
        vec![argmax(gamma)]
    } else {
        picked
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitResult {
    pub model: GmmModel,
    /// Number of sub-clusters chosen by BIC; 1 means the model is unchanged.
    pub k_prime: usize,
    pub scores: Vec<(usize, f64)>,
    /// Component indices now holding the sub-clusters (`[cluster, K, K+1, ..]`).
    pub new_components: Vec<usize>,
    /// For each member point, its components among `new_components`.
    pub member_assignments: Vec<Vec<usize>>,
}

/// Tries to replace component `cluster` with 2 or 3 sub-components fitted on
/// its member points. The sub-components share the parent's mass in
/// proportion to their own mixing weights, so the total mass is unchanged.
pub fn try_split(
    model: &GmmModel,
    cluster: usize,
    members: &[Vec<f64>],
    threshold: f64,
    opts: &EmOptions,
    seed: u64,
) -> Result<SplitResult, GmmError> {
    if cluster >= model.k {
        return Err(GmmError::Invalid(format!("no component {cluster}")));
    }
    if members.len() < 2 {
        return Err(GmmError::TooFewPoints { n: members.len(), k: 2 });
    }
    let unchanged = |scores| SplitResult {
        model: model.clone(),
        k_prime: 1,
        scores,
        new_components: vec![cluster],
        member_assignments: vec![vec![cluster]; members.len()],
    };
    let best = fit_best_k(members, 1, 3, opts, seed)?;
    if best.model.k <= 1 {
        return Ok(unchanged(best.scores));
    }
    let sub = best.model;
    let scale = model.suff_s0[cluster] / sub.suff_s0.iter().sum::<f64>();
    let mut s0 = model.suff_s0.clone();
    let mut s1 = model.suff_s1.clone();
    let mut s2 = model.suff_s2.clone();
    let mut new_components = vec![cluster];
    for j in 0..sub.k {
        let scaled0 = sub.suff_s0[j] * scale;
        let scaled1: Vec<f64> = sub.suff_s1[j].iter().map(|v| v * scale).collect();
        let scaled2: Vec<f64> = sub.suff_s2[j].iter().map(|v| v * scale).collect();
        if j == 0 {
            s0[cluster] = scaled0;
            s1[cluster] = scaled1;
            s2[cluster] = scaled2;
        } else {
            new_components.push(s0.len());
            s0.push(scaled0);
            s1.push(scaled1);
            s2.push(scaled2);
        }
    }
    let mut fallback = model.clone();
    fallback.k = 0;
    let new_model = GmmModel::from_stats(s0, s1, s2, model.n, model.reg_eps, None);
    let member_assignments = sub
        .predict_proba(members)?
        .iter()
        .map(|g| assign_from_gamma(g, threshold).into_iter().map(|j| new_components[j]).collect())
        .collect();
    Ok(SplitResult { model: new_model, k_prime: sub.k, scores: best.scores, new_components, member_assignments })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveConfig {
    /// At most this many absorbed points: refresh with full EM instead of a single-point update.
    pub tau_n: usize,
    /// Clusters with more members than this are split candidates.
    pub tau_c: usize,
    pub assign_threshold: f64,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self { tau_n: 100, tau_c: 11, assign_threshold: 0.1 }
    }
}

impl AdaptiveConfig {
    /// `tau_n = max(100, √|D0|)` for an initial corpus of `initial_size` items.
    pub fn for_initial_size(initial_size: usize) -> Self {
        let root = (initial_size as f64).sqrt().round() as usize;
        Self { tau_n: root.max(100), ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), GmmError> {
        if self.tau_c < 2 || self.tau_n < 1 || !(0.0..1.0).contains(&self.assign_threshold) {
            return Err(GmmError::Invalid("adaptive config requires tau_c ≥ 2, tau_n ≥ 1, threshold in [0,1)".into()));
        }
        Ok(())
    }
}

/// A fitted mixture together with the points it has absorbed and each point's
/// cluster memberships.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub model: GmmModel,
    pub points: Vec<Vec<f64>>,
    pub assignments: Vec<Vec<usize>>,
}

impl ClusterState {
    /// Member point indices of each component.
    pub fn members(&self) -> Vec<BTreeSet<usize>> {
        members_of(&self.assignments, self.model.k)
    }
}

fn members_of(assignments: &[Vec<usize>], k: usize) -> Vec<BTreeSet<usize>> {
    let mut out = vec![BTreeSet::new(); k];
    for (i, a) in assignments.iter().enumerate() {
        for &c in a {
            if c < k {
                out[c].insert(i);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum UpdateBranch {
    /// Few points: EM refresh, then a BIC scan over `K..=K+oversized`.
    FullEm { oversized: usize, chosen_k: usize, refit: bool },
    /// Many points: single-point update plus split attempts on oversized clusters.
    Incremental { split_attempts: Vec<usize>, splits: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateOutcome {
    /// Updated state; the new point is the last entry of `points`.
    pub state: ClusterState,
    /// Clusters the new point was assigned to.
    pub assignment: Vec<usize>,
    /// Clusters whose parameters or membership changed, or that are new.
    pub changed_clusters: BTreeSet<usize>,
    /// Clusters whose member set changed, or that are new.
    pub membership_changed: BTreeSet<usize>,
    pub created_clusters: BTreeSet<usize>,
    /// For each component of the new model, the component of the old model it continues.
    pub origin: Vec<Option<usize>>,
    pub branch: UpdateBranch,
}

/// Greedily matches new groups to old groups by descending overlap.
pub fn reconcile(old: &[BTreeSet<usize>], new: &[BTreeSet<usize>]) -> Vec<Option<usize>> {
    let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
    for (j, nm) in new.iter().enumerate() {
        for (o, om) in old.iter().enumerate() {
            let ov = nm.intersection(om).count();
            if ov > 0 {
                pairs.push((ov, j, o));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut origin = vec![None; new.len()];
    let mut used = vec![false; old.len()];
    for (_, j, o) in pairs {
        if origin[j].is_none() && !used[o] {
            origin[j] = Some(o);
            used[o] = true;
        }
    }
    origin
}

fn diff_outcome(
    old: &ClusterState,
    state: ClusterState,
    assignment: Vec<usize>,
    origin: Vec<Option<usize>>,
    branch: UpdateBranch,
) -> UpdateOutcome {
    let old_members = old.members();
    let new_members = state.members();
    let mut changed = BTreeSet::new();
    let mut membership = BTreeSet::new();
    let mut created = BTreeSet::new();
    for (j, o) in origin.iter().enumerate() {
        match o {
            None => {
                created.insert(j);
                changed.insert(j);
                membership.insert(j);
            }
            Some(o) => {
                let m = &old.model;
                let params_same = m.weights[*o] == state.model.weights[j]
                    && m.means[*o] == state.model.means[j]
                    && m.covariances[*o] == state.model.covariances[j];
                if old_members[*o] != new_members[j] {
                    membership.insert(j);
                    changed.insert(j);
                } else if !params_same {
                    changed.insert(j);
                }
            }
        }
    }
    UpdateOutcome { state, assignment, changed_clusters: changed, membership_changed: membership, created_clusters: created, origin, branch }
}

/// Inserts `x` into a clustering: full EM refresh with an enlarged-K BIC scan
/// while few points have been absorbed, otherwise a single-point statistics
/// update followed by split attempts on clusters that grew past `tau_c`.
pub fn adaptive_cluster_update(
    state: &ClusterState,
    x: &[f64],
    cfg: &AdaptiveConfig,
    opts: &EmOptions,
    seed: u64,
) -> Result<UpdateOutcome, GmmError> {
    if x.len() != state.model.dim {
        return Err(GmmError::Dimension { expected: state.model.dim, got: x.len() });
    }
    let mut points = state.points.clone();
    points.push(x.to_vec());

    if state.model.n <= cfg.tau_n {
        let (warm, kept) = refine_em(&state.model, &points, opts)?;
        let warm_model = warm.model;
        let warm_assign: Vec<Vec<usize>> = warm_model
            .predict_proba(&points)?
            .iter()
            .map(|g| assign_from_gamma(g, cfg.assign_threshold))
            .collect();
        let oversized = members_of(&warm_assign, warm_model.k).iter().filter(|m| m.len() > cfg.tau_c).count();
        let mut best_model = warm_model;
        let mut best_assign = warm_assign;
        let mut best_bic = bic(&best_model, &points)?;
        let mut refit = false;
        let base_k = best_model.k;
        for k in base_k + 1..=(base_k + oversized).min(points.len()) {
            let fit = fit_em(&points, k, opts, mix_seed(seed, 0xa000 + k as u64))?;
            let score = bic(&fit.model, &points)?;
            if score < best_bic {
                best_bic = score;
                best_assign = fit
                    .model
                    .predict_proba(&points)?
                    .iter()
                    .map(|g| assign_from_gamma(g, cfg.assign_threshold))
                    .collect();
                best_model = fit.model;
                refit = true;
            }
        }
        let origin = if refit {
            let old_members = state.members();
            let new_members = members_of(&best_assign[..state.points.len()], best_model.k);
            reconcile(&old_members, &new_members)
        } else {
            kept.into_iter().map(Some).collect()
        };
        let assignment = best_assign.last().cloned().unwrap_or_default();
        let chosen_k = best_model.k;
        let new_state = ClusterState { model: best_model, points, assignments: best_assign };
        return Ok(diff_outcome(state, new_state, assignment, origin, UpdateBranch::FullEm { oversized, chosen_k, refit }));
    }

    let (mut model, _) = incremental_update(&state.model, x)?;
    let assignment = soft_assign(&model, x, cfg.assign_threshold)?;
    let mut assignments = state.assignments.clone();
    assignments.push(assignment.clone());
    let mut origin: Vec<Option<usize>> = (0..model.k).map(Some).collect();
    let mut split_attempts = Vec::new();
    let mut splits = 0;
    for &c in &assignment {
        let members: Vec<usize> = (0..assignments.len()).filter(|&i| assignments[i].contains(&c)).collect();
        if members.len() <= cfg.tau_c {
            continue;
        }
        split_attempts.push(c);
        let member_points: Vec<Vec<f64>> = members.iter().map(|&i| points[i].clone()).collect();
        let split = try_split(&model, c, &member_points, cfg.assign_threshold, opts, mix_seed(seed, 0x5000 + c as u64))?;
        if split.k_prime <= 1 {
            continue;
        }
        splits += 1;
        for (&i, sub) in members.iter().zip(&split.member_assignments) {
            let a = &mut assignments[i];
            a.retain(|&j| j != c);
            a.extend(sub.iter().copied());
            a.sort_unstable();
            a.dedup();
        }
        origin[c] = None;
        origin.resize(split.model.k, None);
        model = split.model;
    }
    let assignment = assignments.last().cloned().unwrap_or_default();
    let new_state = ClusterState { model, points, assignments };
    Ok(diff_outcome(state, new_state, assignment, origin, UpdateBranch::Incremental { split_attempts, splits }))
}

/// Removes point `index`, subtracting its current-parameter responsibilities
/// from the statistics when `absorbed` is set.
pub fn remove_point(state: &ClusterState, index: usize, absorbed: bool) -> Result<ClusterState, GmmError> {
    if index >= state.points.len() {
        return Err(GmmError::Invalid(format!("no point {index}")));
    }
    let model = if absorbed {
        decremental_update(&state.model, &state.points[index])?.0
    } else {
        state.model.clone()
    };
    let mut points = state.points.clone();
    let mut assignments = state.assignments.clone();
    points.remove(index);
    assignments.remove(index);
    Ok(ClusterState { model, points, assignments })
}

/// Refits a clustering after deletions, scanning `K` down to `max(1, K-2)` by BIC.
/// Returns the new state and the origin of each new component.
pub fn refit_smaller(state: &ClusterState, threshold: f64, opts: &EmOptions, seed: u64) -> Result<(ClusterState, Vec<Option<usize>>), GmmError> {
    let k = state.model.k.max(1);
    let lo = k.saturating_sub(2).max(1);
    let n = state.points.len();
    let mut best: Option<(GmmModel, f64)> = None;
    for kk in (lo..=k.min(n)).rev() {
        let fit = fit_em(&state.points, kk, opts, mix_seed(seed, 0xd000 + kk as u64))?;
        let score = bic(&fit.model, &state.points)?;
        if best.as_ref().is_none_or(|b| score < b.1) {
            best = Some((fit.model, score));
        }
    }
    let (model, _) = best.ok_or(GmmError::Empty)?;
    let assignments: Vec<Vec<usize>> = model
        .predict_proba(&state.points)?
        .iter()
        .map(|g| assign_from_gamma(g, threshold))
        .collect();
    let origin = reconcile(&state.members(), &members_of(&assignments, model.k));
    Ok((ClusterState { model, points: state.points.clone(), assignments }, origin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(centers: &[f64], per: usize, sigma: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        centers.iter().flat_map(|c| (0..per).map(|_| vec![c + noise.sample(&mut rng)]).collect::<Vec<_>>()).collect()
    }

    #[test]
    fn logpdf_analytic_values() {
        let v = gaussian_logpdf(&[0.0], &[0.0], &[1.0]).unwrap();
        assert!((v - (-0.918_938_533_204_672_7)).abs() < 1e-12);
        let v = gaussian_logpdf(&[0.0, 0.0], &[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((v - (-1.837_877_066_409_345_5)).abs() < 1e-12);
        let cov = [2.0, 0.3, 0.3, 1.0];
        let a = gaussian_logpdf(&[1.0, 2.0], &[0.5, -1.0], &cov).unwrap();
        let b = gaussian_logpdf(&[1.0 - 7.0, 2.0 + 3.0], &[0.5 - 7.0, -1.0 + 3.0], &cov).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert_eq!(gaussian_logpdf(&[0.0], &[0.0], &[-1.0]), Err(GmmError::NotPositiveDefinite));
    }

    fn two_component(weights: [f64; 2], means: [f64; 2]) -> GmmModel {
        let s0 = vec![weights[0] * 10.0, weights[1] * 10.0];
        let s1 = vec![vec![means[0] * s0[0]], vec![means[1] * s0[1]]];
        let s2 = vec![vec![(1.0 + means[0] * means[0]) * s0[0]], vec![(1.0 + means[1] * means[1]) * s0[1]]];
        GmmModel::from_stats(s0, s1, s2, 10, 0.0, None)
    }

    #[test]
    fn responsibility_examples() {
        let pts = vec![vec![0.0], vec![2.0]];
        let one = GmmModel::from_responsibilities(&pts, &[1.0, 1.0], 1, 1e-6);
        assert_eq!(responsibilities(&one, &[5.0]).unwrap(), vec![1.0]);
        let sym = two_component([0.5, 0.5], [-1.0, 1.0]);
        let g = responsibilities(&sym, &[0.0]).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-12 && (g[1] - 0.5).abs() < 1e-12);
        let same = two_component([0.9, 0.1], [3.0, 3.0]);
        let g = responsibilities(&same, &[1.0]).unwrap();
        assert!((g[0] - 0.9).abs() < 1e-12 && (g[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn m_step_sample_moments() {
        let pts = vec![vec![0.0], vec![2.0]];
        let m = m_step(&pts, &[vec![1.0], vec![1.0]], 1e-6).unwrap();
        assert_eq!(m.weights, vec![1.0]);
        assert_eq!(m.means, vec![vec![1.0]]);
        assert!((m.covariances[0][0] - (1.0 + 1e-6)).abs() < 1e-15);
        let hard = m_step(&[vec![0.0], vec![2.0], vec![10.0]], &[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]], 0.0).unwrap();
        assert_eq!(hard.means, vec![vec![1.0], vec![10.0]]);
        assert_eq!(hard.covariances, vec![vec![1.0], vec![0.0]]);
        let empty = m_step(&pts, &[vec![1.0, 0.0], vec![1.0, 0.0]], 0.0).unwrap();
        assert_eq!(empty.empty, vec![1]);
    }

    #[test]
    fn parameter_count() {
        assert_eq!(n_parameters(3, 10), 197);
        assert_eq!(n_parameters(1, 1), 2);
    }

    #[test]
    fn single_component_converges_immediately() {
        let pts = blobs(&[3.0], 40, 2.0, 5);
        let fit = fit_em(&pts, 1, &EmOptions::default(), 1).unwrap();
        assert_eq!(fit.n_iter, 1);
        let mean = pts.iter().map(|p| p[0]).sum::<f64>() / 40.0;
        let var = pts.iter().map(|p| (p[0] - mean).powi(2)).sum::<f64>() / 40.0;
        assert!((fit.model.means[0][0] - mean).abs() < 1e-12);
        assert!((fit.model.covariances[0][0] - var - 1e-6).abs() < 1e-10);
    }

    #[test]
    fn em_is_monotone_and_recovers_two_blobs() {
        let pts = blobs(&[0.0, 100.0], 50, 1.0, 9);
        let fit = fit_em(&pts, 2, &EmOptions::default(), 3).unwrap();
        for w in fit.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8);
        }
        let mut means: Vec<f64> = fit.model.means.iter().map(|m| m[0]).collect();
        means.sort_by(f64::total_cmp);
        assert!(means[0].abs() < 0.5 && (means[1] - 100.0).abs() < 0.5);
    }

    #[test]
    fn stats_and_parameters_agree() {
        let pts = blobs(&[0.0, 20.0, 45.0], 20, 1.5, 11);
        let m = fit_em(&pts, 3, &EmOptions::default(), 2).unwrap().model;
        m.validate().unwrap();
        let n = m.n as f64;
        for c in 0..m.k {
            assert!((m.suff_s0[c] - n * m.weights[c]).abs() < 1e-6);
            let mu = m.suff_s1[c][0] / m.suff_s0[c];
            assert!((mu - m.means[c][0]).abs() < 1e-9);
            let cov = m.suff_s2[c][0] / m.suff_s0[c] - mu * mu;
            assert!((cov + m.reg_eps - m.covariances[c][0]).abs() < 1e-9);
        }
    }

    #[test]
    fn bic_prefers_true_structure() {
        let one = blobs(&[0.0], 60, 1.0, 1);
        let b1 = bic(&fit_em(&one, 1, &EmOptions::default(), 0).unwrap().model, &one).unwrap();
        let b2 = bic(&fit_em(&one, 2, &EmOptions::default(), 0).unwrap().model, &one).unwrap();
        assert!(b1 < b2);
        let two = blobs(&[0.0, 50.0], 30, 1.0, 2);
        let b1 = bic(&fit_em(&two, 1, &EmOptions::default(), 0).unwrap().model, &two).unwrap();
        let b2 = bic(&fit_em(&two, 2, &EmOptions::default(), 0).unwrap().model, &two).unwrap();
        assert!(b2 < b1);
    }

    #[test]
    fn best_k_scan_is_capped_and_handles_constants() {
        let pts = blobs(&[0.0], 4, 1.0, 3);
        let best = fit_best_k(&pts, 1, 50, &EmOptions::default(), 0).unwrap();
        assert_eq!(best.scores.len(), 4);
        let constant = vec![vec![2.0, 2.0]; 12];
        assert_eq!(fit_best_k(&constant, 1, 6, &EmOptions::default(), 0).unwrap().model.k, 1);
    }

    #[test]
    fn incremental_matches_batch_in_one_dimension() {
        let pts = vec![vec![0.0], vec![2.0]];
        let m = GmmModel::from_responsibilities(&pts, &[1.0, 1.0], 1, 0.0);
        let (u, _) = incremental_update(&m, &[4.0]).unwrap();
        assert!((u.means[0][0] - 2.0).abs() < 1e-9);
        assert!((u.covariances[0][0] - 8.0 / 3.0).abs() < 1e-9);
        assert_eq!(u.n, 3);
    }

    #[test]
    fn incremental_leaves_far_clusters_alone() {
        let pts = blobs(&[0.0, 1000.0], 10, 1.0, 4);
        let m = fit_em(&pts, 2, &EmOptions::default(), 0).unwrap().model;
        let far = if m.means[0][0] > 500.0 { 0 } else { 1 };
        let (u, g) = incremental_update(&m, &[0.5]).unwrap();
        assert!(g[1 - far] > 1.0 - 1e-9);
        assert!((u.suff_s0[far] - m.suff_s0[far]).abs() < 1e-9);
        assert!((u.suff_s1[far][0] - m.suff_s1[far][0]).abs() < 1e-9);
        assert!((u.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn soft_assign_examples() {
        assert_eq!(assign_from_gamma(&[0.85, 0.12, 0.03], 0.1), vec![0, 1]);
        assert_eq!(assign_from_gamma(&[1.0], 0.1), vec![0]);
        assert_eq!(assign_from_gamma(&[0.09, 0.09, 0.82], 0.1), vec![2]);
        assert_eq!(assign_from_gamma(&[0.1, 0.1], 0.1), vec![0]);
    }

    #[test]
    fn split_keeps_tight_cluster_and_splits_two_blobs() {
        let tight = blobs(&[0.0], 30, 1.0, 8);
        let m = fit_em(&tight, 1, &EmOptions::default(), 0).unwrap().model;
        let r = try_split(&m, 0, &tight, 0.1, &EmOptions::default(), 1).unwrap();
        assert_eq!(r.k_prime, 1, "{:?}", r.scores);
        assert_eq!(r.model, m);

        let wide = blobs(&[0.0, 50.0], 40, 1.0, 8);
        let m = fit_em(&wide, 1, &EmOptions::default(), 0).unwrap().model;
        let r = try_split(&m, 0, &wide, 0.1, &EmOptions::default(), 1).unwrap();
        assert_eq!(r.k_prime, 2);
        assert_eq!(r.model.k, 2);
        assert!((r.model.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((r.model.suff_s0.iter().sum::<f64>() - m.suff_s0.iter().sum::<f64>()).abs() < 1e-9);
    }

    #[test]
    fn reconcile_matches_by_overlap() {
        let old = vec![BTreeSet::from([0, 1, 2]), BTreeSet::from([3, 4])];
        let new = vec![BTreeSet::from([3, 4, 5]), BTreeSet::from([0, 1]), BTreeSet::from([2])];
        assert_eq!(reconcile(&old, &new), vec![Some(1), Some(0), None]);
    }

    fn state_from(points: Vec<Vec<f64>>, k: usize, seed: u64) -> ClusterState {
        let model = fit_em(&points, k, &EmOptions::default(), seed).unwrap().model;
        let assignments = model.predict_proba(&points).unwrap().iter().map(|g| assign_from_gamma(g, 0.1)).collect();
        ClusterState { model, points, assignments }
    }

    #[test]
    fn full_em_branch_without_oversized_clusters_keeps_k() {
        let st = state_from(blobs(&[0.0, 40.0], 5, 1.0, 2), 2, 0);
        let cfg = AdaptiveConfig { tau_n: 100, tau_c: 11, assign_threshold: 0.1 };
        let out = adaptive_cluster_update(&st, &[0.3], &cfg, &EmOptions::default(), 0).unwrap();
        assert_eq!(out.branch, UpdateBranch::FullEm { oversized: 0, chosen_k: 2, refit: false });
        assert_eq!(out.state.model.k, 2);
        assert!(out.created_clusters.is_empty());
        assert_eq!(out.state.points.len(), 11);
    }

    #[test]
    fn incremental_branch_touches_only_assigned_clusters() {
        let st = state_from(blobs(&[0.0, 40.0], 5, 1.0, 2), 2, 0);
        let cfg = AdaptiveConfig { tau_n: 1, tau_c: 11, assign_threshold: 0.1 };
        let out = adaptive_cluster_update(&st, &[40.2], &cfg, &EmOptions::default(), 0).unwrap();
        assert!(matches!(out.branch, UpdateBranch::Incremental { ref split_attempts, .. } if split_attempts.is_empty()));
        assert_eq!(out.assignment.len(), 1);
        assert_eq!(out.membership_changed, out.assignment.iter().copied().collect());
        assert!(out.created_clusters.is_empty());
    }

    #[test]
    fn oversized_cluster_triggers_split_attempt() {
        let mut st = state_from(blobs(&[0.0, 40.0], 5, 1.0, 2), 2, 0);
        let cfg = AdaptiveConfig { tau_n: 1, tau_c: 11, assign_threshold: 0.1 };
        let mut attempted = false;
        for i in 0..8 {
            let out = adaptive_cluster_update(&st, &[0.01 * i as f64], &cfg, &EmOptions::default(), 0).unwrap();
            if let UpdateBranch::Incremental { split_attempts, .. } = &out.branch {
                attempted |= !split_attempts.is_empty();
            }
            st = out.state;
        }
        assert!(attempted);
    }

    #[test]
    fn removal_undoes_insertion_for_hard_assignments() {
        let st = state_from(blobs(&[0.0, 500.0], 6, 1.0, 3), 2, 0);
        let (m2, _) = incremental_update(&st.model, &[1.0]).unwrap();
        let mut grown = st.clone();
        grown.model = m2;
        grown.points.push(vec![1.0]);
        grown.assignments.push(vec![0]);
        let back = remove_point(&grown, 12, true).unwrap();
        for c in 0..2 {
            assert!((back.model.means[c][0] - st.model.means[c][0]).abs() < 1e-9);
            assert!((back.model.suff_s0[c] - st.model.suff_s0[c]).abs() < 1e-9);
        }
        assert_eq!(back.model.n, 12);
    }
}
