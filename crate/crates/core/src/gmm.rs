//! Full-covariance Gaussian mixtures over logit vectors.
//!
//! Each known class gets its own mixture, fitted by expectation-maximisation
//! on the logits of that class's confidently detected training objects. A
//! detection is then scored by the log-likelihood of its logit vector under
//! every class mixture.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Rng};

/// Densities below this (in linear space) count as underflowed in the E-step.
const RESPONSIBILITY_FLOOR: f64 = 1e-300;

/// Relative AUROC difference treated as a tie during component selection.
const AUROC_TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iterations: usize,
    /// Stop once the relative improvement of the total log-likelihood drops
    /// below this value.
    pub convergence_tol: f64,
    /// Added to every covariance diagonal after each M-step.
    pub covariance_regulariser: f64,
    pub n_restarts: usize,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iterations: 200,
            convergence_tol: 1e-5,
            covariance_regulariser: 1e-6,
            n_restarts: 3,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be >= 1".into()));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::InvalidArgument("convergence_tol must be > 0".into()));
        }
        if !(self.covariance_regulariser >= 0.0) || !self.covariance_regulariser.is_finite() {
            return Err(Error::InvalidArgument(
                "covariance_regulariser must be a finite non-negative number".into(),
            ));
        }
        if self.n_restarts == 0 {
            return Err(Error::InvalidArgument("n_restarts must be >= 1".into()));
        }
        Ok(())
    }
}

/// One weighted Gaussian of a mixture.
///
/// The lower Cholesky factor of the covariance and the log normalising
/// constant are cached at construction so that density evaluation is a single
/// triangular solve.
#[derive(Debug, Clone)]
pub struct GaussianComponent {
    weight: f64,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    chol_lower: DMatrix<f64>,
    log_norm: f64,
}

impl PartialEq for GaussianComponent {
    fn eq(&self, other: &Self) -> bool {
        self.weight == other.weight && self.mean == other.mean && self.covariance == other.covariance
    }
}

impl GaussianComponent {
    /// Builds a component, checking symmetry and positive-definiteness.
    ///
    /// `index` is only used to name the component in errors.
    pub fn new(
        weight: f64,
        mean: DVector<f64>,
        covariance: DMatrix<f64>,
        index: usize,
    ) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::InvalidArgument("component mean is empty".into()));
        }
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: covariance.nrows(),
            });
        }
        if !(weight > 0.0) || !weight.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "component {index}: weight must be positive, got {weight}"
            )));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "component {index}: non-finite parameters"
            )));
        }
        for i in 0..d {
            for j in 0..i {
                if (covariance[(i, j)] - covariance[(j, i)]).abs() > 1e-9 {
                    return Err(Error::InvalidArgument(format!(
                        "component {index}: covariance is not symmetric"
                    )));
                }
            }
        }
        let chol_lower = Cholesky::new(covariance.clone())
            .ok_or(Error::SingularCovariance { component: index })?
            .unpack();
        let log_det_half: f64 = (0..d).map(|i| chol_lower[(i, i)].ln()).sum();
        if !log_det_half.is_finite() {
            return Err(Error::SingularCovariance { component: index });
        }
        let log_norm = -0.5 * d as f64 * (2.0 * PI).ln() - log_det_half;
        Ok(GaussianComponent {
            weight,
            mean,
            covariance,
            chol_lower,
            log_norm,
        })
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// log N(x; mean, covariance), without the mixture weight.
    ///
    /// `scratch` must have length `dim()`; it avoids an allocation per call.
    fn log_density_with(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        let d = self.dim();
        let l = &self.chol_lower;
        let mut maha = 0.0;
        // Forward substitution L z = x - mean.
        for i in 0..d {
            let mut acc = x[i] - self.mean[i];
            for j in 0..i {
                acc -= l[(i, j)] * scratch[j];
            }
            let z = acc / l[(i, i)];
            scratch[i] = z;
            maha += z * z;
        }
        self.log_norm - 0.5 * maha
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let mut scratch = vec![0.0; self.dim()];
        Ok(self.log_density_with(x, &mut scratch))
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        Err(Error::DimensionMismatch { expected, got })
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    /// Total training log-likelihood of the returned parameters.
    pub log_likelihood: f64,
    /// Number of EM iterations (M-steps) used by the winning run.
    pub iterations: usize,
    pub converged: bool,
}

/// Mixture model for a single known class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGmm {
    pub class_id: usize,
    components: Vec<GaussianComponent>,
    pub fit_stats: FitStats,
}

impl ClassGmm {
    pub fn new(class_id: usize, components: Vec<GaussianComponent>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(Error::InvalidArgument("a mixture needs at least one component".into()));
        };
        let d = first.dim();
        for c in &components {
            check_dim(d, c.dim())?;
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "component weights sum to {total}, expected 1"
            )));
        }
        Ok(ClassGmm {
            class_id,
            components,
            fit_stats: FitStats::default(),
        })
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// log Σ_j π_j N(x; μ_j, Σ_j), accumulated in the log domain.
    pub fn log_likelihood(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let mut scratch = vec![0.0; self.dim()];
        Ok(self.log_likelihood_with(x, &mut scratch))
    }

    pub(crate) fn log_likelihood_with(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        if self.components.len() == 1 {
            return self.components[0].log_density_with(x, scratch);
        }
        let mut max = f64::NEG_INFINITY;
        let mut terms = [0.0f64; 16];
        let mut heap;
        let terms: &mut [f64] = if self.components.len() <= terms.len() {
            &mut terms[..self.components.len()]
        } else {
            heap = vec![0.0; self.components.len()];
            &mut heap
        };
        for (t, c) in terms.iter_mut().zip(&self.components) {
            *t = c.weight.ln() + c.log_density_with(x, scratch);
            max = max.max(*t);
        }
        log_sum_exp_with_max(terms, max)
    }
}

fn log_sum_exp_with_max(terms: &[f64], max: f64) -> f64 {
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Convenience wrapper matching the free-function form used across the crate.
pub fn gmm_log_likelihood(model: &ClassGmm, logit: &[f64]) -> Result<f64> {
    model.log_likelihood(logit)
}

/// Provenance recorded alongside a fitted [`GmmSet`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GmmMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_iou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_conf: Option<f64>,
    pub n_components: usize,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// One mixture per known class, all over the same N-dimensional logit space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "GmmSetDoc", try_from = "GmmSetDoc")]
pub struct GmmSet {
    models: Vec<ClassGmm>,
    pub meta: GmmMeta,
}

impl GmmSet {
    /// `models[i]` must be the model of class `i`, and there must be exactly
    /// one model per logit dimension.
    pub fn new(models: Vec<ClassGmm>, meta: GmmMeta) -> Result<Self> {
        let n = models.len();
        if n == 0 {
            return Err(Error::InvalidArgument("GMM set is empty".into()));
        }
        for (i, m) in models.iter().enumerate() {
            if m.class_id != i {
                return Err(Error::InvalidArgument(format!(
                    "model at position {i} has class_id {}",
                    m.class_id
                )));
            }
            check_dim(n, m.dim()).map_err(|e| e.in_class(i))?;
        }
        Ok(GmmSet { models, meta })
    }

    pub fn dim(&self) -> usize {
        self.models.len()
    }

    pub fn models(&self) -> &[ClassGmm] {
        &self.models
    }

    pub fn model(&self, class_id: usize) -> Option<&ClassGmm> {
        self.models.get(class_id)
    }

    /// Per-class log-likelihoods of one logit vector.
    pub fn log_likelihoods(&self, logit: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), logit.len())?;
        let mut scratch = vec![0.0; self.dim()];
        Ok(self
            .models
            .iter()
            .map(|m| m.log_likelihood_with(logit, &mut scratch))
            .collect())
    }

    /// Maximum class log-likelihood of one logit vector.
    pub fn max_log_likelihood(&self, logit: &[f64]) -> Result<f64> {
        Ok(self
            .log_likelihoods(logit)?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max))
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub const GMM_SET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct GmmSetDoc {
    version: u32,
    dim: usize,
    classes: Vec<ClassDoc>,
    meta: GmmMeta,
}

#[derive(Serialize, Deserialize)]
struct ClassDoc {
    class_id: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fit: Option<FitStats>,
}

impl From<GmmSet> for GmmSetDoc {
    fn from(set: GmmSet) -> Self {
        let dim = set.dim();
        let classes = set
            .models
            .iter()
            .map(|m| ClassDoc {
                class_id: m.class_id,
                weights: m.components.iter().map(|c| c.weight).collect(),
                means: m.components.iter().map(|c| c.mean.iter().copied().collect()).collect(),
                covariances: m
                    .components
                    .iter()
                    .map(|c| {
                        c.covariance
                            .row_iter()
                            .map(|r| r.iter().copied().collect())
                            .collect()
                    })
                    .collect(),
                fit: Some(m.fit_stats),
            })
            .collect();
        GmmSetDoc {
            version: GMM_SET_VERSION,
            dim,
            classes,
            meta: set.meta,
        }
    }
}

impl TryFrom<GmmSetDoc> for GmmSet {
    type Error = Error;

    fn try_from(doc: GmmSetDoc) -> Result<Self> {
        if doc.version != GMM_SET_VERSION {
            return Err(Error::Data(format!(
                "unsupported GMM set version {}",
                doc.version
            )));
        }
        let mut classes = doc.classes;
        classes.sort_by_key(|c| c.class_id);
        let mut models = Vec::with_capacity(classes.len());
        for c in classes {
            let class_id = c.class_id;
            let build = || -> Result<ClassGmm> {
                if c.weights.len() != c.means.len() || c.weights.len() != c.covariances.len() {
                    return Err(Error::Data("weights, means and covariances differ in length".into()));
                }
                let mut comps = Vec::with_capacity(c.weights.len());
                for (j, ((w, mean), cov)) in
                    c.weights.iter().zip(&c.means).zip(&c.covariances).enumerate()
                {
                    check_dim(doc.dim, mean.len())?;
                    if cov.len() != doc.dim || cov.iter().any(|r| r.len() != doc.dim) {
                        return Err(Error::DimensionMismatch {
                            expected: doc.dim,
                            got: cov.len(),
                        });
                    }
                    let cov = DMatrix::from_fn(doc.dim, doc.dim, |r, k| cov[r][k]);
                    comps.push(GaussianComponent::new(
                        *w,
                        DVector::from_column_slice(mean),
                        cov,
                        j,
                    )?);
                }
                let mut m = ClassGmm::new(class_id, comps)?;
                m.fit_stats = c.fit.unwrap_or_default();
                Ok(m)
            };
            models.push(build().map_err(|e| e.in_class(class_id))?);
        }
        let set = GmmSet::new(models, doc.meta)?;
        check_dim(doc.dim, set.dim())?;
        Ok(set)
    }
}

/// Log-likelihood history of one EM run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunTrace {
    /// Total training log-likelihood after initialisation and after every
    /// M-step.
    pub log_likelihoods: Vec<f64>,
    pub converged: bool,
    pub failure: Option<String>,
}

/// Fits one mixture by EM, keeping the best of `config.n_restarts` runs.
pub fn fit_gmm(samples: &[Vec<f64>], n_components: usize, config: &EmConfig) -> Result<ClassGmm> {
    fit_gmm_traced(samples, n_components, config).map(|(m, _)| m)
}

/// As [`fit_gmm`], also returning the per-run log-likelihood traces.
pub fn fit_gmm_traced(
    samples: &[Vec<f64>],
    n_components: usize,
    config: &EmConfig,
) -> Result<(ClassGmm, Vec<RunTrace>)> {
    config.validate()?;
    if n_components == 0 {
        return Err(Error::InvalidArgument("n_components must be >= 1".into()));
    }
    if samples.len() < n_components {
        return Err(Error::InsufficientSamples {
            needed: n_components,
            got: samples.len(),
        });
    }
    let d = samples[0].len();
    if d == 0 {
        return Err(Error::InvalidArgument("samples have zero dimension".into()));
    }
    for s in samples {
        check_dim(d, s.len())?;
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite sample value".into()));
        }
    }

    let mut rng = Rng::seed_from_u64(config.seed);
    let mut best: Option<(Vec<GaussianComponent>, FitStats)> = None;
    let mut traces = Vec::with_capacity(config.n_restarts);
    let mut last_err = None;
    for _ in 0..config.n_restarts {
        let mut trace = RunTrace::default();
        match em_run(samples, n_components, config, &mut rng, &mut trace) {
            Ok(components) => {
                let stats = FitStats {
                    log_likelihood: *trace.log_likelihoods.last().unwrap(),
                    iterations: trace.log_likelihoods.len() - 1,
                    converged: trace.converged,
                };
                if best
                    .as_ref()
                    .is_none_or(|(_, b)| stats.log_likelihood > b.log_likelihood)
                {
                    best = Some((components, stats));
                }
            }
            Err(e) => {
                trace.failure = Some(e.to_string());
                last_err = Some(e);
            }
        }
        traces.push(trace);
    }
    match best {
        Some((components, stats)) => {
            let mut model = ClassGmm::new(0, components)?;
            model.fit_stats = stats;
            Ok((model, traces))
        }
        None => Err(last_err.expect("at least one restart ran")),
    }
}

fn em_run(
    samples: &[Vec<f64>],
    k: usize,
    config: &EmConfig,
    rng: &mut Rng,
    trace: &mut RunTrace,
) -> Result<Vec<GaussianComponent>> {
    let n = samples.len();
    let d = samples[0].len();
    let reg = config.covariance_regulariser;

    let seeds = plus_plus_seeds(samples, k, rng);
    let mut init_cov = sample_covariance(samples);
    for i in 0..d {
        init_cov[(i, i)] += reg;
    }
    let mut components = seeds
        .iter()
        .enumerate()
        .map(|(j, &idx)| {
            GaussianComponent::new(
                1.0 / k as f64,
                DVector::from_column_slice(&samples[idx]),
                init_cov.clone(),
                j,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut resp = DMatrix::<f64>::zeros(n, k);
    let mut ll = e_step(samples, &components, &mut resp);
    trace.log_likelihoods.push(ll);

    for _ in 0..config.max_iterations {
        components = m_step(samples, &resp, reg)?;
        let next = e_step(samples, &components, &mut resp);
        if !next.is_finite() {
            return Err(Error::Numerical("training log-likelihood is not finite".into()));
        }
        trace.log_likelihoods.push(next);
        let improvement = (next - ll).abs();
        ll = next;
        if improvement <= config.convergence_tol * ll.abs().max(f64::MIN_POSITIVE) {
            trace.converged = true;
            break;
        }
    }
    Ok(components)
}

/// k-means++ seeding: first seed uniform, later seeds with probability
/// proportional to squared distance from the nearest chosen seed.
fn plus_plus_seeds(samples: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<usize> {
    let n = samples.len();
    let mut seeds = Vec::with_capacity(k);
    seeds.push(rng.random_range(0..n));
    let mut nearest: Vec<f64> = samples.iter().map(|s| sq_dist(s, &samples[seeds[0]])).collect();
    while seeds.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, w) in nearest.iter().enumerate() {
                acc += w;
                if acc > target && *w > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        seeds.push(next);
        for (i, s) in samples.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(s, &samples[next]));
        }
    }
    seeds
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Population (divide-by-n) covariance of the samples.
fn sample_covariance(samples: &[Vec<f64>]) -> DMatrix<f64> {
    let n = samples.len() as f64;
    let d = samples[0].len();
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for s in samples {
        for i in 0..d {
            let di = s[i] - mean[i];
            for j in 0..=i {
                cov[(i, j)] += di * (s[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            let v = cov[(i, j)] / n;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    cov
}

/// Fills `resp` with normalised responsibilities and returns the total
/// log-likelihood.
fn e_step(samples: &[Vec<f64>], components: &[GaussianComponent], resp: &mut DMatrix<f64>) -> f64 {
    let k = components.len();
    let d = samples[0].len();
    let log_weights: Vec<f64> = components.iter().map(|c| c.weight.ln()).collect();
    let mut scratch = vec![0.0; d];
    let mut terms = vec![0.0; k];
    let floor = RESPONSIBILITY_FLOOR.ln();
    let mut total = 0.0;
    for (i, x) in samples.iter().enumerate() {
        let mut max = f64::NEG_INFINITY;
        for (j, c) in components.iter().enumerate() {
            terms[j] = log_weights[j] + c.log_density_with(x, &mut scratch);
            max = max.max(terms[j]);
        }
        let lse = log_sum_exp_with_max(&terms, max);
        total += lse;
        if max < floor || !lse.is_finite() {
            let nearest = components
                .iter()
                .enumerate()
                .map(|(j, c)| (j, sq_dist(x, c.mean.as_slice())))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(j, _)| j)
                .unwrap_or(0);
            for j in 0..k {
                resp[(i, j)] = if j == nearest { 1.0 } else { 0.0 };
            }
        } else {
            for j in 0..k {
                resp[(i, j)] = (terms[j] - lse).exp();
            }
        }
    }
    total
}

fn m_step(samples: &[Vec<f64>], resp: &DMatrix<f64>, reg: f64) -> Result<Vec<GaussianComponent>> {
    let n = samples.len();
    let d = samples[0].len();
    let k = resp.ncols();
    let mut out = Vec::with_capacity(k);
    let mut weights = Vec::with_capacity(k);
    for j in 0..k {
        let nk: f64 = resp.column(j).sum();
        if !(nk > 0.0) {
            return Err(Error::Numerical(format!(
                "component {j} received no responsibility"
            )));
        }
        weights.push(nk / n as f64);
    }
    let weight_sum: f64 = weights.iter().sum();
    for j in 0..k {
        let col = resp.column(j);
        let nk: f64 = col.sum();
        let mut mean = DVector::<f64>::zeros(d);
        for (i, x) in samples.iter().enumerate() {
            let r = col[i];
            if r != 0.0 {
                for a in 0..d {
                    mean[a] += r * x[a];
                }
            }
        }
        mean /= nk;
        let mut cov = DMatrix::<f64>::zeros(d, d);
        let mut diff = vec![0.0; d];
        for (i, x) in samples.iter().enumerate() {
            let r = col[i];
            if r == 0.0 {
                continue;
            }
            for a in 0..d {
                diff[a] = x[a] - mean[a];
            }
            for a in 0..d {
                let ra = r * diff[a];
                for b in 0..=a {
                    cov[(a, b)] += ra * diff[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..=a {
                let v = cov[(a, b)] / nk;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
            cov[(a, a)] += reg;
        }
        out.push(GaussianComponent::new(weights[j] / weight_sum, mean, cov, j)?);
    }
    Ok(out)
}

/// Per-class seed derivation so that each class fit is independent of the
/// order in which classes are processed.
fn class_seed(seed: u64, class_id: usize) -> u64 {
    seed ^ (class_id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Fits one mixture per class. `training_sets` must contain a nonempty entry
/// for every class `0..N`, where `N` is the logit dimension.
pub fn fit_all(
    training_sets: &BTreeMap<usize, Vec<Vec<f64>>>,
    n_components: usize,
    config: &EmConfig,
) -> Result<GmmSet> {
    fit_all_with(training_sets, config, |samples, cfg| {
        fit_gmm(samples, n_components, cfg)
    })
    .map(|mut set| {
        set.meta.n_components = n_components;
        set
    })
}

/// Fits a single spherical Gaussian per class (mean plus one shared variance
/// across dimensions). This is the simple model mixtures are compared against.
pub fn fit_all_spherical(
    training_sets: &BTreeMap<usize, Vec<Vec<f64>>>,
    config: &EmConfig,
) -> Result<GmmSet> {
    fit_all_with(training_sets, config, |samples, cfg| {
        fit_spherical_gaussian(samples, cfg.covariance_regulariser)
    })
    .map(|mut set| {
        set.meta.n_components = 1;
        set
    })
}

pub fn fit_spherical_gaussian(samples: &[Vec<f64>], regulariser: f64) -> Result<ClassGmm> {
    let Some(first) = samples.first() else {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    };
    let d = first.len();
    for s in samples {
        check_dim(d, s.len())?;
    }
    let n = samples.len() as f64;
    let mut mean = DVector::<f64>::zeros(d);
    for s in samples {
        for a in 0..d {
            mean[a] += s[a];
        }
    }
    mean /= n;
    let var = samples
        .iter()
        .map(|s| sq_dist(s, mean.as_slice()))
        .sum::<f64>()
        / (n * d as f64)
        + regulariser;
    let cov = DMatrix::<f64>::identity(d, d) * var;
    ClassGmm::new(0, vec![GaussianComponent::new(1.0, mean, cov, 0)?])
}

fn fit_all_with<F>(
    training_sets: &BTreeMap<usize, Vec<Vec<f64>>>,
    config: &EmConfig,
    fit: F,
) -> Result<GmmSet>
where
    F: Fn(&[Vec<f64>], &EmConfig) -> Result<ClassGmm> + Sync,
{
    config.validate()?;
    let dim = training_sets
        .values()
        .find_map(|v| v.first().map(Vec::len))
        .ok_or_else(|| Error::Data("no training samples for any class".into()))?;
    for class_id in 0..dim {
        match training_sets.get(&class_id) {
            Some(v) if !v.is_empty() => {}
            _ => return Err(Error::EmptyClass { class_id }),
        }
    }
    if let Some((&extra, _)) = training_sets.range(dim..).next() {
        return Err(Error::InvalidArgument(format!(
            "class {extra} is outside the {dim}-dimensional logit space"
        )));
    }
    let fit_one = |class_id: usize| -> Result<ClassGmm> {
        let cfg = EmConfig {
            seed: class_seed(config.seed, class_id),
            ..*config
        };
        let mut m = fit(&training_sets[&class_id], &cfg).map_err(|e| e.in_class(class_id))?;
        m.class_id = class_id;
        Ok(m)
    };
    #[cfg(feature = "parallel")]
    let models = {
        use rayon::prelude::*;
        (0..dim).into_par_iter().map(fit_one).collect::<Result<Vec<_>>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let models = (0..dim).map(fit_one).collect::<Result<Vec<_>>>()?;
    GmmSet::new(models, GmmMeta::default())
}

/// Outcome of the component-count search.
#[derive(Debug, Clone)]
pub struct ComponentSelection {
    pub selected: usize,
    /// AUROC separating correct from misclassified validation detections,
    /// per candidate count that fitted successfully.
    pub per_count_auroc: BTreeMap<usize, f64>,
    /// Candidates whose fit failed, with the failure message.
    pub skipped: BTreeMap<usize, String>,
    /// The fitted set for the selected count.
    pub model: GmmSet,
}

/// Picks the shared component count whose mixtures best separate correctly
/// classified validation detections from misclassified ones, scoring each
/// detection by its maximum class log-likelihood. Ties go to the smaller
/// count.
pub fn select_components(
    candidate_counts: &[usize],
    train_sets: &BTreeMap<usize, Vec<Vec<f64>>>,
    val_correct: &[(Vec<f64>, usize)],
    val_misclassified: &[(Vec<f64>, usize)],
    config: &EmConfig,
) -> Result<ComponentSelection> {
    if candidate_counts.is_empty() {
        return Err(Error::InvalidArgument("no candidate component counts".into()));
    }
    if candidate_counts.contains(&0) {
        return Err(Error::InvalidArgument("component counts must be >= 1".into()));
    }
    if val_correct.is_empty() || val_misclassified.is_empty() {
        return Err(Error::Data(
            "component selection needs both correct and misclassified validation detections".into(),
        ));
    }
    let mut counts = candidate_counts.to_vec();
    counts.sort_unstable();
    counts.dedup();

    let mut per_count_auroc = BTreeMap::new();
    let mut skipped = BTreeMap::new();
    let mut best: Option<(usize, f64, GmmSet)> = None;
    let mut last_err = None;
    for &m in &counts {
        let set = match fit_all(train_sets, m, config) {
            Ok(s) => s,
            Err(e) => {
                skipped.insert(m, e.to_string());
                last_err = Some(e);
                continue;
            }
        };
        let score = |v: &[(Vec<f64>, usize)]| -> Result<Vec<f64>> {
            v.iter().map(|(l, _)| set.max_log_likelihood(l)).collect()
        };
        let pos = score(val_correct)?;
        let neg = score(val_misclassified)?;
        let auc = crate::eval::auroc_from_scores(&pos, &neg)?;
        per_count_auroc.insert(m, auc);
        let better = match &best {
            None => true,
            Some((_, b, _)) => auc > b + AUROC_TIE_TOL * b.abs().max(1.0),
        };
        if better {
            best = Some((m, auc, set));
        }
    }
    match best {
        Some((selected, _, model)) => Ok(ComponentSelection {
            selected,
            per_count_auroc,
            skipped,
            model,
        }),
        None => Err(last_err.expect("at least one candidate was tried")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_component(mean: &[f64], weight: f64, idx: usize) -> GaussianComponent {
        let d = mean.len();
        GaussianComponent::new(
            weight,
            DVector::from_column_slice(mean),
            DMatrix::identity(d, d),
            idx,
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_at_mean() {
        let m = ClassGmm::new(0, vec![identity_component(&[0.0, 0.0], 1.0, 0)]).unwrap();
        let v = m.log_likelihood(&[0.0, 0.0]).unwrap();
        assert!((v - -(2.0 * PI).ln()).abs() < 1e-12);
        let v = m.log_likelihood(&[1.0, 0.0]).unwrap();
        assert!((v - (-(2.0 * PI).ln() - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn two_symmetric_components_at_origin() {
        let m = ClassGmm::new(
            0,
            vec![
                identity_component(&[-5.0, 0.0], 0.5, 0),
                identity_component(&[5.0, 0.0], 0.5, 1),
            ],
        )
        .unwrap();
        // Direct summation of both weighted densities.
        let dens = |mx: f64| 0.5 * (-(0.0 - mx) * (0.0 - mx) / 2.0).exp() / (2.0 * PI);
        let expected = (dens(-5.0) + dens(5.0)).ln();
        let got = m.log_likelihood(&[0.0, 0.0]).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - -14.337877066409345).abs() < 1e-9);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = ClassGmm::new(0, vec![identity_component(&[0.0, 0.0], 1.0, 0)]).unwrap();
        assert!(matches!(
            m.log_likelihood(&[0.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn weights_must_sum_to_one() {
        let r = ClassGmm::new(
            0,
            vec![
                identity_component(&[0.0], 0.5, 0),
                identity_component(&[1.0], 0.4, 1),
            ],
        );
        assert!(r.is_err());
    }

    #[test]
    fn non_pd_covariance_names_component() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let r = GaussianComponent::new(1.0, DVector::zeros(2), cov, 3);
        assert!(matches!(r, Err(Error::SingularCovariance { component: 3 })));
    }

    #[test]
    fn too_few_samples() {
        let s = vec![vec![0.0, 1.0]];
        let r = fit_gmm(&s, 2, &EmConfig::default());
        assert!(matches!(r, Err(Error::InsufficientSamples { needed: 2, got: 1 })));
    }

    #[test]
    fn identical_points_collapse_to_regulariser() {
        let p = vec![0.5, -2.25];
        let s = vec![p.clone(); 3];
        let cfg = EmConfig::default();
        let m = fit_gmm(&s, 1, &cfg).unwrap();
        let c = &m.components()[0];
        assert_eq!(c.mean().as_slice(), p.as_slice());
        let expected = DMatrix::<f64>::identity(2, 2) * cfg.covariance_regulariser;
        assert_eq!(c.covariance(), &expected);
    }

    #[test]
    fn missing_class_is_named() {
        let mut sets = BTreeMap::new();
        sets.insert(0, vec![vec![0.0, 0.0, 0.0]; 4]);
        sets.insert(1, vec![vec![1.0, 0.0, 0.0]; 4]);
        sets.insert(2, vec![]);
        let err = fit_all(&sets, 1, &EmConfig::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyClass { class_id: 2 }));
        assert!(err.to_string().contains("class 2"));
    }

    #[test]
    fn config_validation() {
        let bad = EmConfig {
            n_restarts: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = EmConfig {
            convergence_tol: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
