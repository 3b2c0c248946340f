//! K-Means prototypes for the unlabeled target domain.
//!
//! Seeding is k-means++; iterations are plain Lloyd steps. The assignment step runs
//! in parallel, but centre updates accumulate sequentially in point order so that a
//! seeded run is bit-reproducible regardless of the worker count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{FeatureSet, ModelFile};
use crate::error::{Error, Result};
use crate::math::sq_dist;

/// A set of J cluster centres in a d-dimensional space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    dim: usize,
    centers: Vec<Vec<f64>>,
}

impl PrototypeSet {
    pub fn new(centers: Vec<Vec<f64>>) -> Result<Self> {
        let dim = centers.first().map(Vec::len).unwrap_or(0);
        let set = Self { dim, centers };
        set.check()?;
        Ok(set)
    }

    fn check(&self) -> Result<()> {
        if self.centers.is_empty() {
            return Err(Error::validation("a prototype set needs at least one centre"));
        }
        if self.dim == 0 {
            return Err(Error::validation("prototype dimension must be at least 1"));
        }
        for c in &self.centers {
            if c.len() != self.dim {
                return Err(Error::validation("prototype centres differ in dimension"));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation("non-finite prototype centre"));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    /// Index of the closest centre and the squared distance to it (lowest index on ties).
    pub fn nearest(&self, f: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (j, c) in self.centers.iter().enumerate() {
            let d = sq_dist(f, c);
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    }
}

impl ModelFile for PrototypeSet {
    const KIND: &'static str = "prototype_set";

    fn validate(&self) -> Result<()> {
        self.check()
    }
}

/// Minimum Euclidean distance from `f` to any prototype.
pub fn nearest_distance(f: &[f64], protos: &PrototypeSet) -> Result<f64> {
    if f.len() != protos.dim() {
        return Err(Error::shape(format!(
            "query has dimension {}, prototypes have {}",
            f.len(),
            protos.dim()
        )));
    }
    Ok(protos.nearest(f).1.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub max_iter: usize,
    /// Stop once the relative objective improvement falls below this.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub prototypes: PrototypeSet,
    /// Cluster index per input point, consistent with `prototypes`.
    pub assignments: Vec<usize>,
    /// Lloyd objective after every assignment step.
    pub objective_history: Vec<f64>,
}

impl KMeansFit {
    pub fn objective(&self) -> f64 {
        *self.objective_history.last().unwrap_or(&0.0)
    }
}

fn assign(points: &FeatureSet, centers: &[Vec<f64>]) -> Vec<(usize, f64)> {
    let dim = points.dim();
    points
        .as_flat()
        .par_chunks_exact(dim)
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centers.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

fn kmeans_pp(points: &FeatureSet, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = Vec::with_capacity(k);
    centers.push(points.row(rng.random_range(0..n)).to_vec());
    let mut d2: Vec<f64> = points.rows().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points.row(idx).to_vec();
        for (i, p) in points.rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &c));
        }
        centers.push(c);
    }
    centers
}

/// Lloyd's K-Means with k-means++ seeding.
pub fn kmeans(points: &FeatureSet, j: usize, seed: u64, cfg: &KMeansConfig) -> Result<KMeansFit> {
    if points.is_empty() {
        return Err(Error::EmptyInput("k-means over an empty point set".into()));
    }
    if j == 0 {
        return Err(Error::validation("k-means needs at least one cluster"));
    }
    let n = points.len();
    if n < j {
        return Err(Error::InsufficientData { needed: j, got: n });
    }
    let dim = points.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_pp(points, j, &mut rng);

    let mut assigned = assign(points, &centers);
    let mut history = vec![assigned.iter().map(|a| a.1).sum::<f64>()];

    for _ in 0..cfg.max_iter {
        let mut sums = vec![vec![0.0; dim]; j];
        let mut counts = vec![0usize; j];
        for (p, &(c, _)) in points.rows().zip(&assigned) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..j {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                centers[c] = sums[c].iter().map(|s| s * inv).collect();
            }
        }
        // Empty clusters take over the point farthest from its centre, drawn only
        // from clusters that keep at least one other member.
        let empty: Vec<usize> = (0..j).filter(|&c| counts[c] == 0).collect();
        if !empty.is_empty() {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| assigned[b].1.total_cmp(&assigned[a].1).then(a.cmp(&b)));
            let mut cursor = order.into_iter();
            for c in empty {
                for i in cursor.by_ref() {
                    let owner = assigned[i].0;
                    if counts[owner] >= 2 {
                        counts[owner] -= 1;
                        counts[c] = 1;
                        centers[c] = points.row(i).to_vec();
                        break;
                    }
                }
            }
        }

        let prev = *history.last().unwrap();
        assigned = assign(points, &centers);
        let obj: f64 = assigned.iter().map(|a| a.1).sum();
        history.push(obj);
        if prev <= 0.0 || (prev - obj) <= cfg.tol * prev {
            break;
        }
    }

    Ok(KMeansFit {
        prototypes: PrototypeSet::new(centers)?,
        assignments: assigned.into_iter().map(|a| a.0).collect(),
        objective_history: history,
    })
}
