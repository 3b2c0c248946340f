//! Planted domain-shift worlds with hidden target ground truth, and segmentation
//! metrics.
//!
//! Each map is tiled into square blocks; every block takes one class and every
//! pixel draws from one of that class's Gaussian clusters. Target maps use the
//! same process followed by a rotation of the first two axes and a translation.
//! Source maps may also contain hard blocks whose features come from clusters far
//! from all target mass.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{FeatureMap, LabelMap, IGNORE};
use crate::error::{Error, Result};

pub const MAX_DIM: usize = 32;
/// Minimum separation, in units of the larger standard deviation involved,
/// between a hard source cluster and every target cluster.
pub const HARD_SEPARATION: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub mean: Vec<f64>,
    /// Per-axis standard deviation.
    pub std: Vec<f64>,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Shift {
    pub translation: Vec<f64>,
    /// Counter-clockwise rotation of the first two axes about the origin, in degrees.
    pub rotation_deg: f64,
}

/// Source-only cluster carrying an existing class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardRegion {
    pub class: usize,
    pub cluster: ClusterSpec,
    /// Probability that a block of `class` is replaced by a hard block.
    pub block_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub dim: usize,
    pub classes: Vec<Vec<ClusterSpec>>,
    /// Relative block frequency per class; uniform when empty.
    #[serde(default)]
    pub class_weights: Vec<f64>,
    /// Target block frequency per class; `class_weights` when empty.
    #[serde(default)]
    pub target_class_weights: Vec<f64>,
    #[serde(default)]
    pub shift: Shift,
    /// Extra target translation per class, applied after the global shift.
    #[serde(default)]
    pub class_translation: Vec<Vec<f64>>,
    #[serde(default)]
    pub hard_regions: Vec<HardRegion>,
    pub height: usize,
    pub width: usize,
    pub block: usize,
    pub source_maps: usize,
    pub target_maps: usize,
    pub seed: u64,
}

fn max_std(c: &ClusterSpec) -> f64 {
    c.std.iter().copied().fold(0.0, f64::max)
}

fn iso(mean: [f64; 2], std: f64) -> ClusterSpec {
    ClusterSpec {
        mean: mean.to_vec(),
        std: vec![std; 2],
        weight: 1.0,
    }
}

impl WorldSpec {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Class A as two clusters flanking class B.
    pub fn figure1a(seed: u64) -> Self {
        Self {
            dim: 2,
            classes: vec![
                vec![iso([-4.0, 0.0], 1.0), iso([4.0, 0.0], 1.0)],
                vec![iso([0.0, 0.0], 1.0)],
            ],
            class_weights: vec![2.0, 1.0],
            target_class_weights: vec![],
            shift: Shift {
                translation: vec![0.3, 0.3],
                rotation_deg: 5.0,
            },
            class_translation: vec![],
            hard_regions: vec![],
            height: 24,
            width: 24,
            block: 6,
            source_maps: 16,
            target_maps: 12,
            seed,
        }
    }

    /// Two classes whose clusters have a 10:1 axis variance ratio, elongated along
    /// perpendicular axes.
    pub fn anisotropic(seed: u64) -> Self {
        let s = 10f64.sqrt();
        Self {
            dim: 2,
            classes: vec![
                vec![ClusterSpec {
                    mean: vec![0.0, 0.0],
                    std: vec![s, 1.0],
                    weight: 1.0,
                }],
                vec![ClusterSpec {
                    mean: vec![4.0, 0.0],
                    std: vec![1.0, s],
                    weight: 1.0,
                }],
            ],
            class_weights: vec![],
            target_class_weights: vec![],
            shift: Shift::default(),
            class_translation: vec![],
            hard_regions: vec![],
            height: 24,
            width: 24,
            block: 6,
            source_maps: 16,
            target_maps: 12,
            seed,
        }
    }

    /// Three classes; part of class 0's source blocks form a wide cluster beyond
    /// class 1, far from any target data.
    pub fn hard_regions(seed: u64) -> Self {
        Self {
            dim: 2,
            classes: vec![
                vec![iso([-5.0, 0.0], 1.0)],
                vec![iso([2.0, 1.6], 1.0)],
                vec![iso([2.0, -1.6], 1.0)],
            ],
            class_weights: vec![],
            target_class_weights: vec![],
            shift: Shift {
                translation: vec![0.0, 1.5],
                rotation_deg: 0.0,
            },
            class_translation: vec![],
            hard_regions: vec![HardRegion {
                class: 0,
                cluster: iso([2.0, 11.6], 1.0),
                block_fraction: 0.8,
            }],
            height: 24,
            width: 24,
            block: 6,
            source_maps: 16,
            target_maps: 12,
            seed,
        }
    }

    /// Two overlapping classes, the second rare in the source domain but as
    /// frequent as the first in the target, which is also translated across
    /// the class axis.
    pub fn shifted(seed: u64) -> Self {
        Self {
            dim: 2,
            classes: vec![vec![iso([-1.25, 0.0], 1.0)], vec![iso([1.25, 0.0], 1.0)]],
            class_weights: vec![9.0, 1.0],
            target_class_weights: vec![1.0, 1.0],
            shift: Shift {
                translation: vec![0.0, 1.5],
                rotation_deg: 0.0,
            },
            class_translation: vec![],
            hard_regions: vec![],
            height: 24,
            width: 24,
            block: 6,
            source_maps: 16,
            target_maps: 12,
            seed,
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "figure1a" => Ok(Self::figure1a(seed)),
            "anisotropic" => Ok(Self::anisotropic(seed)),
            "hard_regions" => Ok(Self::hard_regions(seed)),
            "shifted" => Ok(Self::shifted(seed)),
            other => Err(Error::Config(format!(
                "unknown world preset {other:?} (expected figure1a, anisotropic, hard_regions or shifted)"
            ))),
        }
    }

    fn check_cluster(&self, c: &ClusterSpec, what: &str) -> Result<()> {
        if c.mean.len() != self.dim || c.std.len() != self.dim {
            return Err(Error::validation(format!("{what}: cluster dimension differs from {}", self.dim)));
        }
        if c.std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::validation(format!("{what}: standard deviations must be positive")));
        }
        if c.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::validation(format!("{what}: non-finite mean")));
        }
        if !(c.weight > 0.0) || !c.weight.is_finite() {
            return Err(Error::validation(format!("{what}: cluster weight must be positive")));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim > MAX_DIM {
            return Err(Error::validation(format!("dimension must be in 1..={MAX_DIM}")));
        }
        if self.classes.is_empty() {
            return Err(Error::validation("a world needs at least one class"));
        }
        for (k, cl) in self.classes.iter().enumerate() {
            if cl.is_empty() {
                return Err(Error::validation(format!("class {k} has no clusters")));
            }
            for c in cl {
                self.check_cluster(c, &format!("class {k}"))?;
            }
        }
        for weights in [&self.class_weights, &self.target_class_weights] {
            if !weights.is_empty()
                && (weights.len() != self.classes.len() || weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()))
            {
                return Err(Error::validation("class weights must be positive, one per class"));
            }
        }
        if !self.shift.translation.is_empty() && self.shift.translation.len() != self.dim {
            return Err(Error::validation("shift translation dimension mismatch"));
        }
        if self.shift.rotation_deg != 0.0 && self.dim < 2 {
            return Err(Error::validation("rotation needs at least two dimensions"));
        }
        if !self.class_translation.is_empty()
            && (self.class_translation.len() != self.classes.len()
                || self.class_translation.iter().any(|t| t.len() != self.dim))
        {
            return Err(Error::validation("class translations must have one vector per class"));
        }
        if self.height == 0 || self.width == 0 || self.block == 0 {
            return Err(Error::validation("map size and block size must be positive"));
        }
        if self.source_maps == 0 || self.target_maps == 0 {
            return Err(Error::validation("need at least one source and one target map"));
        }
        for (i, hr) in self.hard_regions.iter().enumerate() {
            if hr.class >= self.classes.len() {
                return Err(Error::validation(format!("hard region {i} names unknown class {}", hr.class)));
            }
            if !(0.0..=1.0).contains(&hr.block_fraction) {
                return Err(Error::validation(format!("hard region {i}: block fraction outside [0, 1]")));
            }
            self.check_cluster(&hr.cluster, &format!("hard region {i}"))?;
            for (k, cl) in self.classes.iter().enumerate() {
                for c in cl {
                    let centre = self.shift_point(&c.mean, k);
                    let d = centre
                        .iter()
                        .zip(&hr.cluster.mean)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    // Rotation preserves the per-axis spread only up to a permutation,
                    // so the larger axis bounds the target spread.
                    let sigma = max_std(c).max(max_std(&hr.cluster));
                    if d < HARD_SEPARATION * sigma {
                        return Err(Error::validation(format!(
                            "hard region {i} lies {d:.3} from a target cluster of class {k}; needs ≥ {:.3}",
                            HARD_SEPARATION * sigma
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Maps a source-domain point of class `class` to the target domain.
    pub fn shift_point(&self, x: &[f64], class: usize) -> Vec<f64> {
        let mut y = x.to_vec();
        if self.shift.rotation_deg != 0.0 {
            let (s, c) = self.shift.rotation_deg.to_radians().sin_cos();
            let (a, b) = (y[0], y[1]);
            y[0] = c * a - s * b;
            y[1] = s * a + c * b;
        }
        for (v, t) in y.iter_mut().zip(&self.shift.translation) {
            *v += t;
        }
        if let Some(t) = self.class_translation.get(class) {
            for (v, t) in y.iter_mut().zip(t) {
                *v += t;
            }
        }
        y
    }
}

/// A labeled map; `hard` marks pixels drawn from a hard source region.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldMap {
    pub features: FeatureMap,
    pub labels: LabelMap,
    pub hard: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    pub source: Vec<WorldMap>,
    /// Target maps; their labels are ground truth hidden from training.
    pub target: Vec<WorldMap>,
}

fn pick(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn sample(c: &ClusterSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    c.mean
        .iter()
        .zip(&c.std)
        .map(|(m, s)| {
            let z: f64 = StandardNormal.sample(rng);
            m + s * z
        })
        .collect()
}

fn map_seed(seed: u64, domain: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ domain.wrapping_mul(0xD1B5_4A32_D192_ED03)
        ^ (index as u64).wrapping_mul(0xA24B_AED4_963E_E407)
}

fn generate_map(spec: &WorldSpec, target: bool, seed: u64) -> Result<WorldMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, d) = (spec.height, spec.width, spec.dim);
    let class_weights = match (target, &spec.class_weights, &spec.target_class_weights) {
        (true, _, t) if !t.is_empty() => t.clone(),
        (_, s, _) if !s.is_empty() => s.clone(),
        _ => vec![1.0; spec.num_classes()],
    };
    let cluster_weights: Vec<Vec<f64>> = spec
        .classes
        .iter()
        .map(|cl| cl.iter().map(|c| c.weight).collect())
        .collect();
    let mut data = vec![0f32; h * w * d];
    let mut labels = vec![IGNORE; h * w];
    let mut hard = vec![false; h * w];
    for br in (0..h).step_by(spec.block) {
        for bc in (0..w).step_by(spec.block) {
            let class = pick(&class_weights, &mut rng);
            let hard_cluster = if target {
                None
            } else {
                spec.hard_regions
                    .iter()
                    .filter(|hr| hr.class == class)
                    .find(|hr| rng.random::<f64>() < hr.block_fraction)
                    .map(|hr| &hr.cluster)
            };
            for r in br..(br + spec.block).min(h) {
                for c in bc..(bc + spec.block).min(w) {
                    let i = r * w + c;
                    let x = match hard_cluster {
                        Some(hc) => sample(hc, &mut rng),
                        None => {
                            let k = pick(&cluster_weights[class], &mut rng);
                            let x = sample(&spec.classes[class][k], &mut rng);
                            if target {
                                spec.shift_point(&x, class)
                            } else {
                                x
                            }
                        }
                    };
                    for (slot, v) in data[i * d..(i + 1) * d].iter_mut().zip(x) {
                        *slot = v as f32;
                    }
                    labels[i] = class as i32;
                    hard[i] = hard_cluster.is_some();
                }
            }
        }
    }
    Ok(WorldMap {
        features: FeatureMap::new(h, w, d, data)?,
        labels: LabelMap::new(h, w, labels)?,
        hard,
    })
}

pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let source = (0..spec.source_maps)
        .into_par_iter()
        .map(|i| generate_map(spec, false, map_seed(spec.seed, 1, i)))
        .collect::<Result<Vec<_>>>()?;
    let target = (0..spec.target_maps)
        .into_par_iter()
        .map(|i| generate_map(spec, true, map_seed(spec.seed, 2, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(World {
        spec: spec.clone(),
        source,
        target,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapEntry {
    pub features: String,
    pub labels: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hard: Option<String>,
}

/// Index of a world directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: WorldSpec,
    pub source: Vec<MapEntry>,
    pub target: Vec<MapEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl World {
    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    /// Writes FMAP/LMAP files and a manifest into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let write = |prefix: &str, maps: &[WorldMap]| -> Result<Vec<MapEntry>> {
            maps.iter()
                .enumerate()
                .map(|(i, m)| {
                    let features = format!("{prefix}_{i:03}.fmap");
                    let labels = format!("{prefix}_{i:03}.lmap");
                    m.features.save(dir.join(&features))?;
                    m.labels.save(dir.join(&labels))?;
                    let hard = if m.hard.iter().any(|&h| h) {
                        let name = format!("{prefix}_{i:03}.hard.lmap");
                        let mask = m.hard.iter().map(|&h| h as i32).collect();
                        LabelMap::new(m.labels.height(), m.labels.width(), mask)?.save(dir.join(&name))?;
                        Some(name)
                    } else {
                        None
                    };
                    Ok(MapEntry { features, labels, hard })
                })
                .collect()
        };
        let manifest = Manifest {
            spec: self.spec.clone(),
            source: write("source", &self.source)?,
            target: write("target", &self.target)?,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        manifest.spec.validate()?;
        let read = |entries: &[MapEntry]| -> Result<Vec<WorldMap>> {
            entries
                .iter()
                .map(|e| {
                    let features = FeatureMap::load(dir.join(&e.features))?;
                    let labels = LabelMap::load(dir.join(&e.labels))?;
                    if features.height() != labels.height() || features.width() != labels.width() {
                        return Err(Error::shape(format!("{} and {} differ in size", e.features, e.labels)));
                    }
                    let hard = match &e.hard {
                        Some(name) => LabelMap::load(dir.join(name))?.labels().iter().map(|&v| v == 1).collect(),
                        None => vec![false; labels.num_pixels()],
                    };
                    Ok(WorldMap { features, labels, hard })
                })
                .collect()
        };
        Ok(Self {
            source: read(&manifest.source)?,
            target: read(&manifest.target)?,
            spec: manifest.spec,
        })
    }

    pub fn manifest_path(dir: impl AsRef<Path>) -> PathBuf {
        dir.as_ref().join(MANIFEST_FILE)
    }
}

/// Pixel-level confusion counts, rows indexed by truth and columns by prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
    /// Truth-labeled pixels whose prediction was ignore, per truth class.
    unassigned: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
            unassigned: vec![0; classes],
        }
    }

    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.height() != truth.height() || pred.width() != truth.width() {
            return Err(Error::shape("prediction and truth differ in size"));
        }
        pred.check_classes(self.classes)?;
        truth.check_classes(self.classes)?;
        for (p, t) in pred.labels().iter().zip(truth.labels()) {
            if *t == IGNORE {
                continue;
            }
            let t = *t as usize;
            if *p == IGNORE {
                self.unassigned[t] += 1;
            } else {
                self.counts[t * self.classes + *p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn report(&self) -> EvalReport {
        let c = self.classes;
        let assigned: u64 = self.counts.iter().sum();
        let unassigned: u64 = self.unassigned.iter().sum();
        let correct: u64 = (0..c).map(|k| self.get(k, k)).sum();
        let iou: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum::<u64>() + self.unassigned[k];
                if row == 0 {
                    return None;
                }
                let tp = self.get(k, k);
                let fp: u64 = (0..c).filter(|&j| j != k).map(|j| self.get(j, k)).sum();
                Some(tp as f64 / (row + fp) as f64)
            })
            .collect();
        let present: Vec<f64> = iou.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        let total = assigned + unassigned;
        EvalReport {
            accuracy: if assigned == 0 { 0.0 } else { correct as f64 / assigned as f64 },
            iou,
            miou,
            confusion: (0..c).map(|k| self.counts[k * c..(k + 1) * c].to_vec()).collect(),
            pl_ratio: if total == 0 { 0.0 } else { assigned as f64 / total as f64 },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Accuracy over pixels that received a prediction.
    pub accuracy: f64,
    /// Per-class IoU; `None` for classes absent from the ground truth.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub confusion: Vec<Vec<u64>>,
    /// Fraction of truth-labeled pixels that received a prediction.
    pub pl_ratio: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,class,value\n");
        let _ = writeln!(s, "accuracy,,{:.9}", self.accuracy);
        let _ = writeln!(s, "miou,,{:.9}", self.miou);
        let _ = writeln!(s, "pl_ratio,,{:.9}", self.pl_ratio);
        for (k, v) in self.iou.iter().enumerate() {
            let v = v.map(|v| format!("{v:.9}")).unwrap_or_default();
            let _ = writeln!(s, "iou,{k},{v}");
        }
        s
    }

    pub fn pretty(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mIoU      {:6.2}", 100.0 * self.miou);
        let _ = writeln!(s, "accuracy  {:6.2}", 100.0 * self.accuracy);
        let _ = writeln!(s, "coverage  {:6.2}", 100.0 * self.pl_ratio);
        for (k, v) in self.iou.iter().enumerate() {
            match v {
                Some(v) => {
                    let _ = writeln!(s, "  class {k:<3} IoU {:6.2}", 100.0 * v);
                }
                None => {
                    let _ = writeln!(s, "  class {k:<3} absent");
                }
            }
        }
        s
    }
}

/// Metrics of one predicted map against its ground truth.
pub fn evaluate(pred: &LabelMap, truth: &LabelMap, classes: usize) -> Result<EvalReport> {
    let mut c = Confusion::new(classes);
    c.add(pred, truth)?;
    Ok(c.report())
}

/// Metrics pooled over a dataset of (prediction, truth) pairs.
pub fn evaluate_all<'a>(
    pairs: impl IntoIterator<Item = (&'a LabelMap, &'a LabelMap)>,
    classes: usize,
) -> Result<EvalReport> {
    let mut c = Confusion::new(classes);
    for (p, t) in pairs {
        c.add(p, t)?;
    }
    Ok(c.report())
}
