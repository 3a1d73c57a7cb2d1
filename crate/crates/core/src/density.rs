//! Class-conditional Gaussian (mixture) densities over detection embeddings.
//!
//! With one component per class (the default) the class Gaussian is the
//! closed-form sample mean and unbiased sample covariance. More components are
//! fitted with EM from a k-means++ start.
//!
//! Every covariance is regularized by adding `epsilon * scale * I`, where
//! `scale` is the mean diagonal variance (`trace / D`, or 1 when the trace is
//! zero). In EM the scale is computed once from the class's pooled covariance,
//! which makes the regularized M-step the exact maximizer of the
//! log-likelihood augmented with a `-scale * epsilon / 2 * tr(inv(Sigma))`
//! term per sample and component. EM is monotone in that objective, which is
//! what [`EmFit::objective_trace`] records.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interchange::{ClassVocabulary, ModelFormat};
use crate::matching::{LabeledDetection, MatchLabel};
use crate::numeric::log_sum_exp;
use crate::rng;

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DensityError {
    #[error("no embeddings to fit")]
    Empty,
    #[error("class `{0}` has no training embeddings")]
    EmptyClass(String),
    #[error("{n} samples cannot support {k} mixture components")]
    TooFewSamples { n: usize, k: usize },
    #[error("component count must be at least 1")]
    ZeroComponents,
    #[error("embedding has dimension {found}, expected {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("non-finite embedding value")]
    NonFinite,
    #[error("epsilon must be positive and finite, got {0}")]
    Epsilon(f64),
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
}

pub type Result<T, E = DensityError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceKind {
    #[default]
    Full,
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityConfig {
    pub components: usize,
    pub epsilon: f64,
    pub covariance: CovarianceKind,
    pub seed: u64,
    pub max_iter: usize,
    /// Relative convergence tolerance on the EM objective.
    pub tol: f64,
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig {
            components: 1,
            epsilon: DEFAULT_EPSILON,
            covariance: CovarianceKind::Full,
            seed: 0,
            max_iter: 200,
            tol: 1e-10,
        }
    }
}

/// Dense symmetric matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl From<Vec<Vec<f64>>> for SymMatrix {
    fn from(rows: Vec<Vec<f64>>) -> Self {
        let dim = rows.len();
        SymMatrix {
            dim,
            data: rows.into_iter().flatten().collect(),
        }
    }
}

impl From<SymMatrix> for Vec<Vec<f64>> {
    fn from(m: SymMatrix) -> Self {
        if m.dim == 0 {
            return Vec::new();
        }
        m.data.chunks(m.dim).map(<[f64]>::to_vec).collect()
    }
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        SymMatrix {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn scaled_identity(dim: usize, value: f64) -> Self {
        let mut m = SymMatrix::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = value;
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.dim + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    fn add_diagonal(&mut self, v: f64) {
        for i in 0..self.dim {
            self.data[i * self.dim + i] += v;
        }
    }

    fn zero_off_diagonal(&mut self) {
        for r in 0..self.dim {
            for c in 0..self.dim {
                if r != c {
                    self.data[r * self.dim + c] = 0.0;
                }
            }
        }
    }

    fn is_well_shaped(&self) -> bool {
        self.data.len() == self.dim * self.dim
    }

    fn is_symmetric(&self) -> bool {
        (0..self.dim).all(|r| {
            (0..r).all(|c| {
                let a = self.get(r, c);
                let b = self.get(c, r);
                (a - b).abs() <= 1e-12 * (a.abs().max(b.abs()).max(1e-300))
            })
        })
    }
}

/// Lower Cholesky factor `L` with `L L^T = A`, row-major.
pub fn cholesky(a: &SymMatrix) -> Option<Vec<f64>> {
    let n = a.dim;
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get(i, j);
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return None;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// `epsilon * (trace / D)`, falling back to `epsilon` for a zero trace.
fn regularization(cov: &SymMatrix, epsilon: f64) -> f64 {
    let scale = cov.trace() / cov.dim as f64;
    if scale > 0.0 && scale.is_finite() {
        epsilon * scale
    } else {
        epsilon
    }
}

/// Adds `amount * I`, escalating tenfold if rounding still defeats Cholesky.
fn regularize(cov: &mut SymMatrix, amount: f64) {
    cov.add_diagonal(amount);
    let mut extra = amount;
    for _ in 0..12 {
        if cholesky(cov).is_some() {
            return;
        }
        cov.add_diagonal(extra * 9.0);
        extra *= 10.0;
    }
}

fn validate_samples(samples: &[Vec<f64>]) -> Result<usize> {
    let first = samples.first().ok_or(DensityError::Empty)?;
    let dim = first.len();
    if dim == 0 {
        return Err(DensityError::Dimension { expected: 1, found: 0 });
    }
    for s in samples {
        if s.len() != dim {
            return Err(DensityError::Dimension {
                expected: dim,
                found: s.len(),
            });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(DensityError::NonFinite);
        }
    }
    Ok(dim)
}

/// Sample mean and unregularized covariance with divisor `n - 1`
/// (`n` when only one sample, which yields the zero matrix).
pub fn sample_moments(samples: &[Vec<f64>]) -> Result<(Vec<f64>, SymMatrix)> {
    let dim = validate_samples(samples)?;
    let n = samples.len();
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = SymMatrix::zeros(dim);
    let mut centered = vec![0.0; dim];
    for s in samples {
        for ((c, v), m) in centered.iter_mut().zip(s).zip(&mean) {
            *c = v - m;
        }
        for r in 0..dim {
            for c in 0..=r {
                cov.data[r * dim + c] += centered[r] * centered[c];
            }
        }
    }
    let divisor = if n > 1 { (n - 1) as f64 } else { 1.0 };
    for r in 0..dim {
        for c in 0..=r {
            let v = cov.data[r * dim + c] / divisor;
            cov.data[r * dim + c] = v;
            cov.data[c * dim + r] = v;
        }
    }
    Ok((mean, cov))
}

/// Closed-form single Gaussian: mean, unbiased covariance, regularized.
/// A single sample yields `epsilon * I`.
pub fn fit_class_gaussian(
    samples: &[Vec<f64>],
    epsilon: f64,
    kind: CovarianceKind,
) -> Result<(Vec<f64>, SymMatrix)> {
    check_epsilon(epsilon)?;
    let (mean, mut cov) = sample_moments(samples)?;
    if kind == CovarianceKind::Diagonal {
        cov.zero_off_diagonal();
    }
    let amount = regularization(&cov, epsilon);
    regularize(&mut cov, amount);
    Ok((mean, cov))
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(DensityError::Epsilon(epsilon))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub covariance: SymMatrix,
}

/// Result of an EM run for one class.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub components: Vec<GaussianComponent>,
    /// Regularized objective after each E-step (see module docs).
    pub objective_trace: Vec<f64>,
    /// Plain data log-likelihood after each E-step.
    pub log_likelihood_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Evaluation-ready form of a component.
#[derive(Debug, Clone)]
struct Prepared {
    log_weight: f64,
    mean: Vec<f64>,
    chol: Vec<f64>,
    /// `-(D ln 2pi + ln det Sigma) / 2`
    log_norm: f64,
}

impl Prepared {
    fn new(c: &GaussianComponent) -> Result<Self> {
        let dim = c.mean.len();
        let chol = cholesky(&c.covariance).ok_or(DensityError::NotPositiveDefinite)?;
        let log_det: f64 = (0..dim).map(|i| chol[i * dim + i].ln()).sum::<f64>() * 2.0;
        Ok(Prepared {
            log_weight: c.weight.ln(),
            mean: c.mean.clone(),
            chol,
            log_norm: -0.5 * (dim as f64 * (2.0 * PI).ln() + log_det),
        })
    }

    /// `ln N(x; mean, Sigma)`, using `work` as scratch of length D.
    fn log_density(&self, x: &[f64], work: &mut [f64]) -> f64 {
        let dim = self.mean.len();
        let mut maha = 0.0;
        for i in 0..dim {
            let row = &self.chol[i * dim..i * dim + i];
            let mut s = x[i] - self.mean[i];
            for (l, w) in row.iter().zip(work.iter()) {
                s -= l * w;
            }
            let y = s / self.chol[i * dim + i];
            work[i] = y;
            maha += y * y;
        }
        self.log_norm - 0.5 * maha
    }

    /// `tr(inv(Sigma)) = ||inv(L)||_F^2`.
    fn trace_inverse(&self) -> f64 {
        let dim = self.mean.len();
        let mut total = 0.0;
        let mut col = vec![0.0; dim];
        for e in 0..dim {
            // solve L y = e_e
            for i in 0..dim {
                let mut s = if i == e { 1.0 } else { 0.0 };
                for k in 0..i {
                    s -= self.chol[i * dim + k] * col[k];
                }
                col[i] = s / self.chol[i * dim + i];
            }
            total += col.iter().map(|v| v * v).sum::<f64>();
        }
        total
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by a few Lloyd steps; returns hard assignments.
fn kmeans_init(samples: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = samples.len();
    let mut centers: Vec<Vec<f64>> = vec![samples[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = samples.iter().map(|s| sq_dist(s, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(samples[idx].clone());
        for (d, s) in d2.iter_mut().zip(samples) {
            *d = d.min(sq_dist(s, centers.last().unwrap()));
        }
    }

    let mut assign = vec![0usize; n];
    for _ in 0..10 {
        let mut changed = false;
        for (i, s) in samples.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centers.iter().enumerate() {
                let d = sq_dist(s, c);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let dim = samples[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (s, &a) in samples.iter().zip(&assign) {
            counts[a] += 1;
            for (acc, v) in sums[a].iter_mut().zip(s) {
                *acc += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|v| v / counts[j] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    assign
}

/// Weighted M-step for one component. `resp[i]` is the responsibility of
/// this component for sample `i`.
fn m_step(
    samples: &[Vec<f64>],
    resp: &[f64],
    n_total: f64,
    reg: f64,
    kind: CovarianceKind,
    fallback_mean: &[f64],
) -> GaussianComponent {
    let dim = samples[0].len();
    let nk: f64 = resp.iter().sum();
    if nk <= 0.0 {
        return GaussianComponent {
            weight: 0.0,
            mean: fallback_mean.to_vec(),
            covariance: SymMatrix::scaled_identity(dim, reg),
        };
    }
    let mut mean = vec![0.0; dim];
    for (s, r) in samples.iter().zip(resp) {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += r * v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nk);
    let mut cov = SymMatrix::zeros(dim);
    let mut centered = vec![0.0; dim];
    for (s, &r) in samples.iter().zip(resp) {
        if r == 0.0 {
            continue;
        }
        for ((c, v), m) in centered.iter_mut().zip(s).zip(&mean) {
            *c = v - m;
        }
        for a in 0..dim {
            let ra = r * centered[a];
            for b in 0..=a {
                cov.data[a * dim + b] += ra * centered[b];
            }
        }
    }
    for a in 0..dim {
        for b in 0..=a {
            let v = cov.data[a * dim + b] / nk;
            cov.data[a * dim + b] = v;
            cov.data[b * dim + a] = v;
        }
    }
    if kind == CovarianceKind::Diagonal {
        cov.zero_off_diagonal();
    }
    regularize(&mut cov, reg);
    GaussianComponent {
        weight: nk / n_total,
        mean,
        covariance: cov,
    }
}

/// EM for a `k`-component mixture on one class's embeddings.
pub fn fit_gmm_em(samples: &[Vec<f64>], k: usize, config: &DensityConfig) -> Result<EmFit> {
    check_epsilon(config.epsilon)?;
    if k == 0 {
        return Err(DensityError::ZeroComponents);
    }
    let dim = validate_samples(samples)?;
    let n = samples.len();
    if n < k {
        return Err(DensityError::TooFewSamples { n, k });
    }

    // Fixed regularization scale from the pooled (biased) covariance.
    let (_, mut pooled) = sample_moments(samples)?;
    if n > 1 {
        pooled.scale((n - 1) as f64 / n as f64);
    }
    if config.covariance == CovarianceKind::Diagonal {
        pooled.zero_off_diagonal();
    }
    let reg = regularization(&pooled, config.epsilon);

    let mut rng = rng::seeded(config.seed);
    let assign = kmeans_init(samples, k, &mut rng);
    let mut components: Vec<GaussianComponent> = Vec::with_capacity(k);
    let mut resp = vec![0.0; n];
    let fallback = samples[0].clone();
    for j in 0..k {
        for (r, &a) in resp.iter_mut().zip(&assign) {
            *r = if a == j { 1.0 } else { 0.0 };
        }
        components.push(m_step(samples, &resp, n as f64, reg, config.covariance, &fallback));
    }

    let mut objective_trace = Vec::new();
    let mut log_likelihood_trace = Vec::new();
    let mut log_resp = vec![vec![0.0; n]; k];
    let mut work = vec![0.0; dim];
    let mut converged = false;
    let mut iterations = 0;
    let mut terms = vec![0.0; k];
    let mut plain = vec![0.0; k];
    while iterations < config.max_iter {
        iterations += 1;
        let prepared: Vec<Prepared> = components.iter().map(Prepared::new).collect::<Result<_>>()?;
        let penalty: Vec<f64> = prepared.iter().map(|p| 0.5 * reg * p.trace_inverse()).collect();
        let mut objective = 0.0;
        let mut ll = 0.0;
        for (i, x) in samples.iter().enumerate() {
            for j in 0..k {
                plain[j] = prepared[j].log_weight + prepared[j].log_density(x, &mut work);
                terms[j] = plain[j] - penalty[j];
            }
            let lse = log_sum_exp(&terms);
            objective += lse;
            ll += log_sum_exp(&plain);
            for j in 0..k {
                log_resp[j][i] = terms[j] - lse;
            }
        }
        objective_trace.push(objective);
        log_likelihood_trace.push(ll);
        if let [.., prev, last] = objective_trace[..] {
            if last - prev <= config.tol * last.abs() {
                converged = true;
                break;
            }
        }
        let mut next = Vec::with_capacity(k);
        for j in 0..k {
            for (r, lr) in resp.iter_mut().zip(&log_resp[j]) {
                *r = lr.exp();
            }
            next.push(m_step(samples, &resp, n as f64, reg, config.covariance, &components[j].mean));
        }
        components = next;
    }

    Ok(EmFit {
        components,
        objective_trace,
        log_likelihood_trace,
        iterations,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMixture {
    pub class_name: String,
    pub prior: f64,
    pub sample_count: usize,
    pub components: Vec<GaussianComponent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DensityParams {
    dim: usize,
    epsilon: f64,
    covariance: CovarianceKind,
    classes: Vec<ClassMixture>,
}

/// Per-class mixtures plus class priors, ready for likelihood evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "DensityParams", into = "DensityParams")]
pub struct ClassDensityModel {
    params: DensityParams,
    prepared: Vec<(f64, Vec<Prepared>)>,
}

impl PartialEq for ClassDensityModel {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

impl From<ClassDensityModel> for DensityParams {
    fn from(m: ClassDensityModel) -> Self {
        m.params
    }
}

impl TryFrom<DensityParams> for ClassDensityModel {
    type Error = String;

    fn try_from(params: DensityParams) -> std::result::Result<Self, String> {
        check_params(&params)?;
        let prepared = params
            .classes
            .iter()
            .map(|c| {
                let comps = c
                    .components
                    .iter()
                    .map(Prepared::new)
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| format!("class `{}`: {e}", c.class_name))?;
                Ok((c.prior.ln(), comps))
            })
            .collect::<std::result::Result<_, String>>()?;
        Ok(ClassDensityModel { params, prepared })
    }
}

fn check_params(p: &DensityParams) -> std::result::Result<(), String> {
    if p.dim == 0 {
        return Err("embedding dimension must be at least 1".into());
    }
    if !(p.epsilon > 0.0 && p.epsilon.is_finite()) {
        return Err(format!("epsilon must be positive, got {}", p.epsilon));
    }
    if p.classes.is_empty() {
        return Err("no classes".into());
    }
    let prior_sum: f64 = p.classes.iter().map(|c| c.prior).sum();
    if (prior_sum - 1.0).abs() > 1e-9 {
        return Err(format!("class priors sum to {prior_sum}"));
    }
    for c in &p.classes {
        if !(c.prior > 0.0 && c.prior <= 1.0) {
            return Err(format!("class `{}` prior {} outside (0, 1]", c.class_name, c.prior));
        }
        if c.components.is_empty() {
            return Err(format!("class `{}` has no components", c.class_name));
        }
        let wsum: f64 = c.components.iter().map(|g| g.weight).sum();
        if (wsum - 1.0).abs() > 1e-9 {
            return Err(format!("class `{}` component weights sum to {wsum}", c.class_name));
        }
        for g in &c.components {
            if !(g.weight >= 0.0) {
                return Err(format!("class `{}` has a negative weight", c.class_name));
            }
            if g.mean.len() != p.dim || g.covariance.dim() != p.dim || !g.covariance.is_well_shaped() {
                return Err(format!("class `{}` component has wrong dimension", c.class_name));
            }
            if g.mean.iter().chain(g.covariance.as_slice()).any(|v| !v.is_finite()) {
                return Err(format!("class `{}` has non-finite parameters", c.class_name));
            }
            if !g.covariance.is_symmetric() {
                return Err(format!("class `{}` covariance is not symmetric", c.class_name));
            }
        }
    }
    Ok(())
}

impl ClassDensityModel {
    /// Builds a model from explicit parameters without refitting or adding
    /// regularization.
    pub fn from_parts(
        classes: Vec<ClassMixture>,
        epsilon: f64,
        covariance: CovarianceKind,
    ) -> std::result::Result<Self, String> {
        let dim = classes
            .first()
            .and_then(|c| c.components.first())
            .map_or(0, |g| g.mean.len());
        ClassDensityModel::try_from(DensityParams {
            dim,
            epsilon,
            covariance,
            classes,
        })
    }

    pub fn dim(&self) -> usize {
        self.params.dim
    }

    pub fn num_classes(&self) -> usize {
        self.params.classes.len()
    }

    pub fn epsilon(&self) -> f64 {
        self.params.epsilon
    }

    pub fn classes(&self) -> &[ClassMixture] {
        &self.params.classes
    }

    /// Per-class `ln pi_c + ln sum_j w_cj N(x; mu_cj, Sigma_cj)`.
    pub fn gmm_log_likelihoods(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        if embedding.len() != self.params.dim {
            return Err(DensityError::Dimension {
                expected: self.params.dim,
                found: embedding.len(),
            });
        }
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(DensityError::NonFinite);
        }
        let mut work = vec![0.0; self.params.dim];
        let mut terms = Vec::new();
        Ok(self
            .prepared
            .iter()
            .map(|(log_prior, comps)| {
                terms.clear();
                terms.extend(comps.iter().map(|c| c.log_weight + c.log_density(embedding, &mut work)));
                log_prior + log_sum_exp(&terms)
            })
            .collect())
    }
}

impl ModelFormat for ClassDensityModel {
    const FORMAT: &'static str = "openset.density";
    const VERSION: u32 = 1;

    fn check(&self) -> std::result::Result<(), String> {
        check_params(&self.params)
    }
}

/// Fits one mixture per vocabulary class from `(class index, embedding)`
/// samples. Priors are the class sample fractions.
pub fn fit_density_model(
    vocabulary: &ClassVocabulary,
    samples: &[(usize, Vec<f64>)],
    config: &DensityConfig,
) -> Result<ClassDensityModel> {
    check_epsilon(config.epsilon)?;
    if config.components == 0 {
        return Err(DensityError::ZeroComponents);
    }
    if samples.is_empty() {
        return Err(DensityError::Empty);
    }
    let mut per_class: Vec<Vec<Vec<f64>>> = vec![Vec::new(); vocabulary.len()];
    for (c, e) in samples {
        per_class[*c].push(e.clone());
    }
    let total = samples.len() as f64;
    let mut classes = Vec::with_capacity(vocabulary.len());
    for (c, embs) in per_class.iter().enumerate() {
        let name = vocabulary.name(c).to_string();
        if embs.is_empty() {
            return Err(DensityError::EmptyClass(name));
        }
        let components = if config.components == 1 {
            let (mean, covariance) = fit_class_gaussian(embs, config.epsilon, config.covariance)?;
            vec![GaussianComponent {
                weight: 1.0,
                mean,
                covariance,
            }]
        } else {
            let class_config = DensityConfig {
                seed: rng::substream_seed(config.seed, &name),
                ..config.clone()
            };
            fit_gmm_em(embs, config.components, &class_config)?.components
        };
        classes.push(ClassMixture {
            class_name: name,
            prior: embs.len() as f64 / total,
            sample_count: embs.len(),
            components,
        });
    }
    let dim = classes[0].components[0].mean.len();
    // Priors are renormalized so that the sum is 1 in floating point too.
    let prior_sum: f64 = classes.iter().map(|c| c.prior).sum();
    classes.iter_mut().for_each(|c| c.prior /= prior_sum);
    ClassDensityModel::try_from(DensityParams {
        dim,
        epsilon: config.epsilon,
        covariance: config.covariance,
        classes,
    })
    .map_err(|_| DensityError::NotPositiveDefinite)
}

/// TP-ID embeddings paired with their ground-truth class index.
pub fn tp_id_samples(labeled: &[LabeledDetection], vocabulary: &ClassVocabulary) -> Vec<(usize, Vec<f64>)> {
    labeled
        .iter()
        .filter(|d| d.label == MatchLabel::TpId)
        .filter_map(|d| d.true_class(vocabulary).map(|c| (c, d.record.embedding.clone())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn rel_close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-12)
    }

    #[test]
    fn moments_use_unbiased_divisor() {
        let (mean, cov) = sample_moments(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(mean, vec![1.0]);
        assert_eq!(cov.get(0, 0), 2.0);
        let (_, reg) = fit_class_gaussian(&[vec![0.0], vec![2.0]], 1e-6, CovarianceKind::Full).unwrap();
        assert!(rel_close(reg.get(0, 0), 2.0 + 2e-6, 1e-12));
    }

    #[test]
    fn single_sample_gets_epsilon_identity() {
        let v = vec![3.0, -1.0, 0.5];
        let (mean, cov) = fit_class_gaussian(std::slice::from_ref(&v), 1e-6, CovarianceKind::Full).unwrap();
        assert_eq!(mean, v);
        assert_eq!(cov, SymMatrix::scaled_identity(3, 1e-6));
        assert!(matches!(
            fit_class_gaussian(&[], 1e-6, CovarianceKind::Full),
            Err(DensityError::Empty)
        ));
    }

    #[test]
    fn priors_follow_class_fractions() {
        let vocab = ClassVocabulary::new(vec!["a".into(), "b".into()]).unwrap();
        let mut samples = Vec::new();
        for i in 0..30 {
            samples.push((0, vec![i as f64, 1.0 + (i % 3) as f64]));
        }
        for i in 0..70 {
            samples.push((1, vec![i as f64 * 0.5, (i % 5) as f64]));
        }
        let model = fit_density_model(&vocab, &samples, &DensityConfig::default()).unwrap();
        assert!((model.classes()[0].prior - 0.3).abs() < 1e-15);
        assert!((model.classes()[1].prior - 0.7).abs() < 1e-15);
        let only_a: Vec<_> = samples[..30].to_vec();
        assert!(matches!(
            fit_density_model(&vocab, &only_a, &DensityConfig::default()),
            Err(DensityError::EmptyClass(name)) if name == "b"
        ));
    }

    fn standard_normal_model(dim: usize) -> ClassDensityModel {
        ClassDensityModel::from_parts(
            vec![ClassMixture {
                class_name: "c".into(),
                prior: 1.0,
                sample_count: 1,
                components: vec![GaussianComponent {
                    weight: 1.0,
                    mean: vec![0.0; dim],
                    covariance: SymMatrix::scaled_identity(dim, 1.0),
                }],
            }],
            1e-6,
            CovarianceKind::Full,
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_at_mean() {
        for dim in [1, 2, 7] {
            let m = standard_normal_model(dim);
            let ll = m.gmm_log_likelihoods(&vec![0.0; dim]).unwrap();
            let expected = -(dim as f64) / 2.0 * (2.0 * PI).ln();
            assert!((ll[0] - expected).abs() < 1e-12);
        }
        let m = standard_normal_model(3);
        assert!(matches!(
            m.gmm_log_likelihoods(&[0.0, 0.0]),
            Err(DensityError::Dimension { expected: 3, found: 2 })
        ));
    }

    #[test]
    fn log_likelihood_decreases_along_ray() {
        let m = standard_normal_model(4);
        let dir = [0.3, -0.5, 0.1, 0.8];
        let mut prev = f64::INFINITY;
        for step in 0..50 {
            let t = step as f64 * 0.5;
            let x: Vec<f64> = dir.iter().map(|d| d * t).collect();
            let ll = m.gmm_log_likelihoods(&x).unwrap()[0];
            assert!(ll < prev);
            prev = ll;
        }
        // far away stays finite
        let far = m.gmm_log_likelihoods(&[1e150, 0.0, 0.0, 0.0]).unwrap()[0];
        assert!(far.is_finite() || far == f64::NEG_INFINITY);
        let ll = m.gmm_log_likelihoods(&[1e6, 0.0, 0.0, 0.0]).unwrap()[0];
        assert!(ll.is_finite());
    }

    fn gaussian_blob(rng: &mut impl Rng, center: &[f64], sd: f64, n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                center
                    .iter()
                    .map(|c| c + sd * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn em_k1_matches_closed_form_moments() {
        let mut rng = rng::seeded(3);
        let samples = gaussian_blob(&mut rng, &[1.0, -2.0, 0.5], 1.5, 200);
        let fit = fit_gmm_em(&samples, 1, &DensityConfig::default()).unwrap();
        let (mean, mut cov) = fit_class_gaussian(&samples, DEFAULT_EPSILON, CovarianceKind::Full).unwrap();
        let n = samples.len() as f64;
        cov.scale((n - 1.0) / n);
        let em = &fit.components[0];
        for (a, b) in em.mean.iter().zip(&mean) {
            assert!(rel_close(*a, *b, 1e-6));
        }
        let frob: f64 = em
            .covariance
            .as_slice()
            .iter()
            .zip(cov.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = cov.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(frob <= 1e-6 * norm);
    }

    #[test]
    fn em_separates_two_clusters() {
        let mut rng = rng::seeded(9);
        let a = gaussian_blob(&mut rng, &[0.0, 0.0], 1.0, 150);
        let b = gaussian_blob(&mut rng, &[20.0, 0.0], 1.0, 100);
        let mean_of = |s: &[Vec<f64>]| -> Vec<f64> {
            (0..2).map(|d| s.iter().map(|v| v[d]).sum::<f64>() / s.len() as f64).collect()
        };
        let (ma, mb) = (mean_of(&a), mean_of(&b));
        let mut all = a.clone();
        all.extend(b.clone());
        let fit = fit_gmm_em(&all, 2, &DensityConfig { seed: 1, ..Default::default() }).unwrap();
        for target in [ma, mb] {
            let best = fit
                .components
                .iter()
                .map(|c| sq_dist(&c.mean, &target).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.5, "{best}");
        }
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[1].abs());
        }
    }

    #[test]
    fn identical_points_are_regularized() {
        let pts = vec![vec![2.0, 2.0, 2.0]; 12];
        for k in 1..=4 {
            let fit = fit_gmm_em(&pts, k, &DensityConfig::default()).unwrap();
            for c in &fit.components {
                assert_eq!(c.covariance, SymMatrix::scaled_identity(3, DEFAULT_EPSILON));
                assert!(cholesky(&c.covariance).is_some());
            }
            assert!(fit.objective_trace.iter().all(|v| v.is_finite()));
        }
        assert!(matches!(
            fit_gmm_em(&pts[..2], 3, &DensityConfig::default()),
            Err(DensityError::TooFewSamples { n: 2, k: 3 })
        ));
        assert!(matches!(
            fit_gmm_em(&[vec![f64::NAN]], 1, &DensityConfig::default()),
            Err(DensityError::NonFinite)
        ));
    }

    #[test]
    fn em_is_deterministic_given_seed() {
        let mut rng = rng::seeded(4);
        let s = gaussian_blob(&mut rng, &[0.0, 1.0], 2.0, 80);
        let cfg = DensityConfig { seed: 17, ..Default::default() };
        let a = fit_gmm_em(&s, 3, &cfg).unwrap();
        let b = fit_gmm_em(&s, 3, &cfg).unwrap();
        assert_eq!(a.components, b.components);
        assert_eq!(a.objective_trace, b.objective_trace);
    }

    #[test]
    fn component_order_does_not_matter() {
        let mut rng = rng::seeded(2);
        let s = gaussian_blob(&mut rng, &[0.0, 1.0, 2.0], 1.0, 90);
        let fit = fit_gmm_em(&s, 3, &DensityConfig::default()).unwrap();
        let mk = |comps: Vec<GaussianComponent>| {
            ClassDensityModel::from_parts(
                vec![ClassMixture {
                    class_name: "c".into(),
                    prior: 1.0,
                    sample_count: 90,
                    components: comps,
                }],
                1e-6,
                CovarianceKind::Full,
            )
            .unwrap()
        };
        let fwd = mk(fit.components.clone());
        let mut rev_comps = fit.components.clone();
        rev_comps.reverse();
        let rev = mk(rev_comps);
        for x in s.iter().take(20) {
            let a = fwd.gmm_log_likelihoods(x).unwrap()[0];
            let b = rev.gmm_log_likelihoods(x).unwrap()[0];
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn diagonal_kind_drops_correlations() {
        let s = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.1]];
        let (_, cov) = fit_class_gaussian(&s, 1e-6, CovarianceKind::Diagonal).unwrap();
        assert_eq!(cov.get(0, 1), 0.0);
        assert!(cov.get(0, 0) > 0.9);
    }

    #[test]
    fn model_round_trips_through_envelope() {
        let vocab = ClassVocabulary::new(vec!["a".into(), "b".into()]).unwrap();
        let mut rng = rng::seeded(1);
        let mut samples: Vec<(usize, Vec<f64>)> = Vec::new();
        for v in gaussian_blob(&mut rng, &[0.0, 0.0], 1.0, 40) {
            samples.push((0, v));
        }
        for v in gaussian_blob(&mut rng, &[5.0, 5.0], 0.3, 25) {
            samples.push((1, v));
        }
        let model = fit_density_model(&vocab, &samples, &DensityConfig { components: 2, ..Default::default() }).unwrap();
        let mut buf = Vec::new();
        crate::interchange::write_model(&model, &mut buf).unwrap();
        let back: ClassDensityModel = crate::interchange::read_model(buf.as_slice()).unwrap();
        assert_eq!(back, model);
        let x = [0.3, -0.2];
        assert_eq!(back.gmm_log_likelihoods(&x).unwrap(), model.gmm_log_likelihoods(&x).unwrap());
    }
}
