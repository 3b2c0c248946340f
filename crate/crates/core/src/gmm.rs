//! Per-class diagonal-covariance Gaussian mixtures fitted by EM.
//!
//! Each semantic class is represented by K weighted anisotropic Gaussians rather
//! than a single centroid; a feature is scored by its log mixture density.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans, KMeansConfig};
use crate::dataio::{FeatureSet, ModelFile};
use crate::error::{Error, Result};
use crate::math::{log_sum_exp, LN_2PI};

/// Default lower bound on every per-dimension variance.
pub const DEFAULT_VAR_FLOOR: f64 = 1e-6;

/// Default cap on the number of features fitted per class.
pub const DEFAULT_SAMPLE_CAP: usize = 300_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Diagonal of the covariance matrix.
    pub var: Vec<f64>,
}

impl GaussianComponent {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `-½ Σ ln σ²_j − (d/2) ln 2π`, the log of the normalising constant.
    fn log_norm(&self) -> f64 {
        -0.5 * (self.var.iter().map(|v| v.ln()).sum::<f64>() + self.dim() as f64 * LN_2PI)
    }

    fn check(&self, var_floor: f64) -> Result<()> {
        if !(self.weight > 0.0 && self.weight <= 1.0 + 1e-12) {
            return Err(Error::validation(format!(
                "mixture weight {} outside (0, 1]",
                self.weight
            )));
        }
        if self.mean.len() != self.var.len() {
            return Err(Error::validation("component mean and variance differ in length"));
        }
        if self.mean.iter().chain(&self.var).any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite component parameter"));
        }
        if let Some(v) = self.var.iter().find(|&&v| v <= 0.0 || v < var_floor) {
            return Err(Error::validation(format!("variance {v} below floor {var_floor}")));
        }
        Ok(())
    }
}

/// `log N(f | μ, diag σ²)`.
pub fn component_log_density(comp: &GaussianComponent, f: &[f64]) -> Result<f64> {
    if f.len() != comp.dim() {
        return Err(Error::shape(format!(
            "query has dimension {}, component has {}",
            f.len(),
            comp.dim()
        )));
    }
    let quad: f64 = f
        .iter()
        .zip(&comp.mean)
        .zip(&comp.var)
        .map(|((x, m), v)| {
            let d = x - m;
            d * d / v + v.ln()
        })
        .sum();
    Ok(-0.5 * quad - 0.5 * comp.dim() as f64 * LN_2PI)
}

/// The K-component mixture for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGmm {
    pub class_id: usize,
    pub dim: usize,
    pub components: Vec<GaussianComponent>,
}

impl ClassGmm {
    pub fn new(class_id: usize, components: Vec<GaussianComponent>) -> Result<Self> {
        let dim = components.first().map(GaussianComponent::dim).unwrap_or(0);
        let gmm = Self {
            class_id,
            dim,
            components,
        };
        gmm.check(0.0)?;
        Ok(gmm)
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    fn check(&self, var_floor: f64) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::validation("a class mixture needs at least one component"));
        }
        for c in &self.components {
            if c.dim() != self.dim {
                return Err(Error::validation("mixture components differ in dimension"));
            }
            c.check(var_floor)?;
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!("mixture weights sum to {total}")));
        }
        Ok(())
    }

    fn prepared(&self) -> PreparedGmm {
        PreparedGmm::new(self)
    }
}

/// `log Σ_k π_k N_k(f)`, evaluated with log-sum-exp.
pub fn log_mixture_density(gmm: &ClassGmm, f: &[f64]) -> Result<f64> {
    if f.len() != gmm.dim {
        return Err(Error::shape(format!(
            "query has dimension {}, mixture has {}",
            f.len(),
            gmm.dim
        )));
    }
    let terms = gmm
        .components
        .iter()
        .map(|c| Ok(c.weight.ln() + component_log_density(c, f)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(log_sum_exp(&terms))
}

/// Per-component constants hoisted out of hot loops.
#[derive(Debug, Clone)]
pub(crate) struct PreparedGmm {
    dim: usize,
    /// `ln π_k + log_norm_k`.
    offsets: Vec<f64>,
    means: Vec<f64>,
    inv_vars: Vec<f64>,
}

impl PreparedGmm {
    fn new(gmm: &ClassGmm) -> Self {
        let dim = gmm.dim;
        let mut p = PreparedGmm {
            dim,
            offsets: Vec::with_capacity(gmm.k()),
            means: Vec::with_capacity(gmm.k() * dim),
            inv_vars: Vec::with_capacity(gmm.k() * dim),
        };
        for c in &gmm.components {
            p.offsets.push(c.weight.ln() + c.log_norm());
            p.means.extend_from_slice(&c.mean);
            p.inv_vars.extend(c.var.iter().map(|v| 1.0 / v));
        }
        p
    }

    /// Writes `ln π_k + ln N_k(f)` for every component into `out`.
    fn joint_log(&self, f: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let m = &self.means[k * self.dim..(k + 1) * self.dim];
            let iv = &self.inv_vars[k * self.dim..(k + 1) * self.dim];
            let mut q = 0.0;
            for j in 0..self.dim {
                let d = f[j] - m[j];
                q += d * d * iv[j];
            }
            *o = self.offsets[k] - 0.5 * q;
        }
    }

    pub(crate) fn log_density(&self, f: &[f64], scratch: &mut Vec<f64>) -> f64 {
        scratch.resize(self.offsets.len(), 0.0);
        self.joint_log(f, scratch);
        log_sum_exp(scratch)
    }
}

/// Mixtures for every class; classes without enough trusted features are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapsModel {
    dim: usize,
    classes: Vec<Option<ClassGmm>>,
}

impl MapsModel {
    pub fn new(num_classes: usize, dim: usize) -> Self {
        Self {
            dim,
            classes: vec![None; num_classes],
        }
    }

    pub fn insert(&mut self, gmm: ClassGmm) -> Result<()> {
        if gmm.dim != self.dim {
            return Err(Error::shape(format!(
                "class {} mixture has dimension {}, model has {}",
                gmm.class_id, gmm.dim, self.dim
            )));
        }
        let c = gmm.class_id;
        if c >= self.classes.len() {
            return Err(Error::validation(format!(
                "class id {c} outside [0, {})",
                self.classes.len()
            )));
        }
        self.classes[c] = Some(gmm);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn get(&self, class: usize) -> Option<&ClassGmm> {
        self.classes.get(class).and_then(Option::as_ref)
    }

    pub fn present_classes(&self) -> Vec<usize> {
        (0..self.classes.len()).filter(|&c| self.classes[c].is_some()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.iter().all(Option::is_none)
    }

    /// Log density of `f` under every class; absent classes yield `None`.
    pub fn log_densities(&self, f: &[f64]) -> Result<Vec<Option<f64>>> {
        self.classes
            .iter()
            .map(|g| g.as_ref().map(|g| log_mixture_density(g, f)).transpose())
            .collect()
    }

    pub(crate) fn prepared(&self) -> Vec<Option<PreparedGmm>> {
        self.classes
            .iter()
            .map(|g| g.as_ref().map(ClassGmm::prepared))
            .collect()
    }
}

impl ModelFile for MapsModel {
    const KIND: &'static str = "maps_model";

    fn validate(&self) -> Result<()> {
        for (c, g) in self.classes.iter().enumerate() {
            if let Some(g) = g {
                if g.class_id != c {
                    return Err(Error::validation(format!(
                        "mixture stored under class {c} claims class {}",
                        g.class_id
                    )));
                }
                if g.dim != self.dim {
                    return Err(Error::validation("class mixtures differ in dimension"));
                }
                g.check(0.0)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub var_floor: f64,
    /// Relative log-likelihood change treated as converged.
    pub tol: f64,
    pub max_iter: usize,
    /// Per-class cap applied by [`subsample`] before fitting.
    pub cap: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            var_floor: DEFAULT_VAR_FLOOR,
            tol: 1e-6,
            max_iter: 100,
            cap: DEFAULT_SAMPLE_CAP,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub gmm: ClassGmm,
    /// Total data log-likelihood of every parameter set visited, initial one first.
    pub log_likelihood_history: Vec<f64>,
    pub converged: bool,
}

impl GmmFit {
    pub fn log_likelihood(&self) -> f64 {
        *self.log_likelihood_history.last().unwrap_or(&f64::NEG_INFINITY)
    }
}

/// Computes responsibilities into `resp` (n×K) and returns the total log-likelihood.
fn e_step(points: &FeatureSet, gmm: &PreparedGmm, resp: &mut [f64]) -> f64 {
    let k = gmm.offsets.len();
    let dim = points.dim();
    let lse: Vec<f64> = resp
        .par_chunks_exact_mut(k)
        .zip(points.as_flat().par_chunks_exact(dim))
        .map(|(r, x)| {
            gmm.joint_log(x, r);
            let l = log_sum_exp(r);
            for v in r.iter_mut() {
                *v = (*v - l).exp();
            }
            l
        })
        .collect();
    lse.iter().sum()
}

fn m_step(points: &FeatureSet, resp: &[f64], prev: &ClassGmm, var_floor: f64) -> ClassGmm {
    let k = prev.k();
    let dim = points.dim();
    let mut nk = vec![0.0; k];
    let mut sums = vec![0.0; k * dim];
    for (x, r) in points.rows().zip(resp.chunks_exact(k)) {
        for c in 0..k {
            nk[c] += r[c];
            let s = &mut sums[c * dim..(c + 1) * dim];
            for j in 0..dim {
                s[j] += r[c] * x[j];
            }
        }
    }
    let means: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            if nk[c] > 0.0 {
                let inv = 1.0 / nk[c];
                sums[c * dim..(c + 1) * dim].iter().map(|s| s * inv).collect()
            } else {
                prev.components[c].mean.clone()
            }
        })
        .collect();
    let mut sq = vec![0.0; k * dim];
    for (x, r) in points.rows().zip(resp.chunks_exact(k)) {
        for c in 0..k {
            let s = &mut sq[c * dim..(c + 1) * dim];
            for j in 0..dim {
                let d = x[j] - means[c][j];
                s[j] += r[c] * d * d;
            }
        }
    }
    let total: f64 = nk.iter().sum();
    let mut components: Vec<GaussianComponent> = means
        .into_iter()
        .enumerate()
        .map(|(c, mean)| {
            if nk[c] > 0.0 {
                let inv = 1.0 / nk[c];
                GaussianComponent {
                    weight: nk[c] / total,
                    mean,
                    var: sq[c * dim..(c + 1) * dim]
                        .iter()
                        .map(|s| (s * inv).max(var_floor))
                        .collect(),
                }
            } else {
                // Responsibility underflowed to zero everywhere: keep the shape,
                // give the component a vanishing weight.
                GaussianComponent {
                    weight: f64::MIN_POSITIVE,
                    mean,
                    var: prev.components[c].var.clone(),
                }
            }
        })
        .collect();
    let wsum: f64 = components.iter().map(|c| c.weight).sum();
    for c in &mut components {
        c.weight /= wsum;
    }
    ClassGmm {
        class_id: prev.class_id,
        dim,
        components,
    }
}

fn kmeans_init(features: &FeatureSet, k: usize, seed: u64, var_floor: f64) -> Result<ClassGmm> {
    let fit = kmeans(features, k, seed, &KMeansConfig::default())?;
    let dim = features.dim();
    let n = features.len();
    let mut counts = vec![0usize; k];
    let mut sq = vec![0.0; k * dim];
    for (x, &a) in features.rows().zip(&fit.assignments) {
        counts[a] += 1;
        let m = &fit.prototypes.centers()[a];
        for j in 0..dim {
            let d = x[j] - m[j];
            sq[a * dim + j] += d * d;
        }
    }
    let components = (0..k)
        .map(|c| {
            let cnt = counts[c].max(1) as f64;
            GaussianComponent {
                weight: counts[c].max(1) as f64,
                mean: fit.prototypes.centers()[c].clone(),
                var: sq[c * dim..(c + 1) * dim]
                    .iter()
                    .map(|s| (s / cnt).max(var_floor))
                    .collect(),
            }
        })
        .collect::<Vec<_>>();
    let total: f64 = components.iter().map(|c| c.weight).sum();
    debug_assert!(total >= n as f64);
    Ok(ClassGmm {
        class_id: 0,
        dim,
        components: components
            .into_iter()
            .map(|mut c| {
                c.weight /= total;
                c
            })
            .collect(),
    })
}

/// Fits a K-component diagonal GMM by EM, warm-started from K-Means.
///
/// The returned mixture has `class_id` 0; callers assign the real id.
pub fn fit_gmm(features: &FeatureSet, k: usize, seed: u64, cfg: &EmConfig) -> Result<GmmFit> {
    if k == 0 {
        return Err(Error::validation("a mixture needs at least one component"));
    }
    if features.len() < k {
        return Err(Error::InsufficientData {
            needed: k,
            got: features.len(),
        });
    }
    if features.as_flat().iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("non-finite feature passed to EM"));
    }
    if !(cfg.var_floor > 0.0) {
        return Err(Error::Config("variance floor must be positive".into()));
    }

    let mut gmm = kmeans_init(features, k, seed, cfg.var_floor)?;
    let mut resp = vec![0.0; features.len() * k];
    let mut history = Vec::new();
    let mut converged = false;

    let mut ll = e_step(features, &gmm.prepared(), &mut resp);
    history.push(ll);
    for _ in 0..cfg.max_iter {
        gmm = m_step(features, &resp, &gmm, cfg.var_floor);
        let next = e_step(features, &gmm.prepared(), &mut resp);
        history.push(next);
        if !next.is_finite() {
            return Err(Error::Numeric("EM log-likelihood is not finite".into()));
        }
        let done = (next - ll).abs() <= cfg.tol * ll.abs();
        ll = next;
        if done {
            converged = true;
            break;
        }
    }
    Ok(GmmFit {
        gmm,
        log_likelihood_history: history,
        converged,
    })
}

/// Uniform subset of at most `cap` rows without replacement, kept in input order.
pub fn subsample(features: &FeatureSet, cap: usize, seed: u64) -> FeatureSet {
    let n = features.len();
    if n <= cap {
        return features.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, cap).into_vec();
    idx.sort_unstable();
    features.select(&idx)
}
