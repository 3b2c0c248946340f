//! Pseudo-label assignment for target pixels.
//!
//! Three assigners share one output type:
//!
//! * [`assign_maps_pla`] scores every pixel under each class mixture and keeps the
//!   arg-max class when its log density clears `delta`;
//! * [`assign_cas_pla`] picks the nearest class centroid and keeps it within a
//!   Euclidean distance threshold;
//! * [`assign_conf_pla`] keeps the arg-max of the classifier when its probability
//!   clears a confidence threshold. This is a fixed-threshold stand-in for
//!   instance-adaptive selectors, not a reimplementation of one.

use std::path::Path;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{FeatureMap, FeatureSet, LabelMap, ModelFile, ProbMap, IGNORE};
use crate::error::{Error, Result};
use crate::gmm::{fit_gmm, subsample, EmConfig, MapsModel};
use crate::math::sq_dist;

/// Smallest per-class sample count accepted for fitting, before the `K` bound.
pub const DEFAULT_MIN_SAMPLES: usize = 50;

/// Per-pixel pseudo labels: exactly one class, or ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelMap {
    labels: LabelMap,
    threshold: f64,
    classes: usize,
}

impl PseudoLabelMap {
    pub fn new(labels: LabelMap, threshold: f64, classes: usize) -> Result<Self> {
        labels.check_classes(classes)?;
        Ok(Self {
            labels,
            threshold,
            classes,
        })
    }

    pub fn labels(&self) -> &LabelMap {
        &self.labels
    }

    pub fn into_labels(self) -> LabelMap {
        self.labels
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.labels.save(path)
    }
}

/// Fraction of pixels carrying a pseudo label.
pub fn pl_ratio(pl: &PseudoLabelMap) -> f64 {
    label_ratio(pl.labels())
}

pub fn label_ratio(labels: &LabelMap) -> f64 {
    let n = labels.num_pixels();
    if n == 0 {
        return 0.0;
    }
    labels.labels().iter().filter(|&&l| l != IGNORE).count() as f64 / n as f64
}

/// Share of labeled pixels that agree with `truth`; `None` when nothing is comparable.
pub fn pl_accuracy(pl: &LabelMap, truth: &LabelMap) -> Result<Option<f64>> {
    let (correct, total) = pl_agreement(pl, truth)?;
    Ok((total > 0).then(|| correct as f64 / total as f64))
}

/// `(correct, compared)` pixel counts between pseudo labels and truth.
pub fn pl_agreement(pl: &LabelMap, truth: &LabelMap) -> Result<(usize, usize)> {
    if pl.height() != truth.height() || pl.width() != truth.width() {
        return Err(Error::shape("pseudo labels and truth differ in size"));
    }
    let mut correct = 0;
    let mut total = 0;
    for (&p, &t) in pl.labels().iter().zip(truth.labels()) {
        if p != IGNORE && t != IGNORE {
            total += 1;
            if p == t {
                correct += 1;
            }
        }
    }
    Ok((correct, total))
}

fn same_grid(h: usize, w: usize, other_h: usize, other_w: usize, what: &str) -> Result<()> {
    if h != other_h || w != other_w {
        return Err(Error::shape(format!(
            "{what}: {other_h}x{other_w} does not match {h}x{w}"
        )));
    }
    Ok(())
}

/// Features of pixels where the prediction arg-max and the ground truth both equal `class`.
pub fn collect_class_features(
    feat: &FeatureMap,
    pred: &ProbMap,
    gt: &LabelMap,
    class: usize,
) -> Result<FeatureSet> {
    same_grid(feat.height(), feat.width(), pred.height(), pred.width(), "prediction")?;
    same_grid(feat.height(), feat.width(), gt.height(), gt.width(), "labels")?;
    if class >= pred.classes() {
        return Err(Error::validation(format!(
            "class {class} outside [0, {})",
            pred.classes()
        )));
    }
    let mut out = FeatureSet::new(feat.dim());
    for i in 0..feat.num_pixels() {
        if gt.get(i) == Some(class) && pred.argmax(i) == class {
            out.push_f32(feat.pixel(i));
        }
    }
    Ok(out)
}

/// A source batch: latent features, classifier output, and ground truth on one grid.
#[derive(Debug, Clone)]
pub struct SourceSample {
    pub features: FeatureMap,
    pub pred: ProbMap,
    pub labels: LabelMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapsBuildConfig {
    pub em: EmConfig,
    /// Classes with fewer than `max(K, min_samples)` trusted features are left absent.
    pub min_samples: usize,
}

impl Default for MapsBuildConfig {
    fn default() -> Self {
        Self {
            em: EmConfig::default(),
            min_samples: DEFAULT_MIN_SAMPLES,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MapsBuild {
    pub model: MapsModel,
    /// Trusted features collected per class, before subsampling.
    pub collected: Vec<usize>,
}

fn class_seed(seed: u64, class: usize) -> u64 {
    seed ^ (class as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Gathers trusted features per class over all batches.
pub fn collect_all(batches: &[SourceSample], num_classes: usize) -> Result<Vec<FeatureSet>> {
    let dim = batches
        .first()
        .map(|b| b.features.dim())
        .ok_or_else(|| Error::EmptyInput("no source batches".into()))?;
    let mut per_class = vec![FeatureSet::new(dim); num_classes];
    for b in batches {
        if b.features.dim() != dim {
            return Err(Error::shape("source batches differ in feature dimension"));
        }
        if b.pred.classes() != num_classes {
            return Err(Error::shape(format!(
                "prediction has {} classes, expected {num_classes}",
                b.pred.classes()
            )));
        }
        b.labels.check_classes(num_classes)?;
        for (c, set) in per_class.iter_mut().enumerate() {
            set.extend(&collect_class_features(&b.features, &b.pred, &b.labels, c)?)?;
        }
    }
    Ok(per_class)
}

/// Fits one mixture per class on the trusted source features.
pub fn build_maps(
    batches: &[SourceSample],
    num_classes: usize,
    k: usize,
    seed: u64,
    cfg: &MapsBuildConfig,
) -> Result<MapsBuild> {
    let per_class = collect_all(batches, num_classes)?;
    let collected: Vec<usize> = per_class.iter().map(FeatureSet::len).collect();
    if collected.iter().all(|&n| n == 0) {
        return Err(Error::EmptyModel(
            "no correctly classified source features in any class".into(),
        ));
    }
    let dim = per_class[0].dim();
    let floor = k.max(cfg.min_samples);
    let mut model = MapsModel::new(num_classes, dim);
    for (c, feats) in per_class.iter().enumerate() {
        if feats.len() < floor {
            warn!(
                "class {c}: {} trusted features, below the floor of {floor}; left absent",
                feats.len()
            );
            continue;
        }
        let s = class_seed(seed, c);
        let sample = subsample(feats, cfg.em.cap, s);
        let mut fit = fit_gmm(&sample, k, s, &cfg.em)?;
        debug!(
            "class {c}: fitted K={k} on {} features, log-likelihood {:.4}, converged {}",
            sample.len(),
            fit.log_likelihood(),
            fit.converged
        );
        fit.gmm.class_id = c;
        model.insert(fit.gmm)?;
    }
    if model.is_empty() {
        return Err(Error::EmptyModel(format!(
            "every class fell below the {floor}-sample floor"
        )));
    }
    Ok(MapsBuild { model, collected })
}

/// The density-threshold rule for one pixel: arg-max over present classes
/// (lowest id on ties), kept only if its log density is at least `delta`.
pub fn maps_decision(log_densities: &[Option<f64>], delta: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (c, d) in log_densities.iter().enumerate() {
        if let Some(d) = *d {
            if best.is_none_or(|(_, b)| d > b) {
                best = Some((c, d));
            }
        }
    }
    best.filter(|&(_, d)| d >= delta).map(|(c, _)| c)
}

/// Assigns pseudo labels by log mixture density.
pub fn assign_maps_pla(model: &MapsModel, feat: &FeatureMap, delta: f64) -> Result<PseudoLabelMap> {
    if model.is_empty() {
        return Err(Error::EmptyModel("no class mixtures to assign from".into()));
    }
    if feat.dim() != model.dim() {
        return Err(Error::shape(format!(
            "features have dimension {}, model has {}",
            feat.dim(),
            model.dim()
        )));
    }
    let prepared = model.prepared();
    let labels: Vec<i32> = (0..feat.num_pixels())
        .into_par_iter()
        .map_init(
            || (Vec::new(), Vec::new()),
            |(scratch, dens), i| {
                let f = feat.pixel_f64(i);
                dens.clear();
                dens.extend(
                    prepared
                        .iter()
                        .map(|p| p.as_ref().map(|p| p.log_density(&f, scratch))),
                );
                maps_decision(dens, delta).map_or(IGNORE, |c| c as i32)
            },
        )
        .collect();
    PseudoLabelMap::new(
        LabelMap::new(feat.height(), feat.width(), labels)?,
        delta,
        model.num_classes(),
    )
}

/// One centroid per class; absent classes are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidModel {
    dim: usize,
    centroids: Vec<Option<Vec<f64>>>,
}

impl CentroidModel {
    pub fn new(dim: usize, centroids: Vec<Option<Vec<f64>>>) -> Result<Self> {
        let m = Self { dim, centroids };
        m.validate()?;
        Ok(m)
    }

    /// Centroids of the trusted source features of each class.
    pub fn from_batches(batches: &[SourceSample], num_classes: usize) -> Result<Self> {
        let per_class = collect_all(batches, num_classes)?;
        let dim = per_class[0].dim();
        let centroids = per_class
            .iter()
            .map(|set| {
                (!set.is_empty()).then(|| {
                    let mut m = vec![0.0; dim];
                    for r in set.rows() {
                        for (a, v) in m.iter_mut().zip(r) {
                            *a += v;
                        }
                    }
                    let inv = 1.0 / set.len() as f64;
                    m.iter_mut().for_each(|v| *v *= inv);
                    m
                })
            })
            .collect();
        let model = CentroidModel::new(dim, centroids)?;
        if model.centroids.iter().all(Option::is_none) {
            return Err(Error::EmptyModel("no class has a centroid".into()));
        }
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.centroids.len()
    }

    pub fn centroid(&self, class: usize) -> Option<&[f64]> {
        self.centroids.get(class).and_then(|c| c.as_deref())
    }

    /// Nearest present centroid (lowest id on ties) and its Euclidean distance.
    pub fn nearest(&self, f: &[f64]) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (c, m) in self.centroids.iter().enumerate() {
            if let Some(m) = m {
                let d = sq_dist(f, m);
                if best.is_none_or(|(_, b)| d < b) {
                    best = Some((c, d));
                }
            }
        }
        best.map(|(c, d)| (c, d.sqrt()))
    }
}

impl ModelFile for CentroidModel {
    const KIND: &'static str = "centroid_model";

    fn validate(&self) -> Result<()> {
        for m in self.centroids.iter().flatten() {
            if m.len() != self.dim {
                return Err(Error::validation("centroids differ in dimension"));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation("non-finite centroid"));
            }
        }
        Ok(())
    }
}

/// Assigns the nearest centroid's class when it lies within `dist_threshold`.
pub fn assign_cas_pla(model: &CentroidModel, feat: &FeatureMap, dist_threshold: f64) -> Result<PseudoLabelMap> {
    if model.centroids.iter().all(Option::is_none) {
        return Err(Error::EmptyModel("no centroids to assign from".into()));
    }
    if feat.dim() != model.dim() {
        return Err(Error::shape(format!(
            "features have dimension {}, centroids have {}",
            feat.dim(),
            model.dim()
        )));
    }
    let labels: Vec<i32> = (0..feat.num_pixels())
        .into_par_iter()
        .map(|i| match model.nearest(&feat.pixel_f64(i)) {
            Some((c, d)) if d <= dist_threshold => c as i32,
            _ => IGNORE,
        })
        .collect();
    PseudoLabelMap::new(
        LabelMap::new(feat.height(), feat.width(), labels)?,
        dist_threshold,
        model.num_classes(),
    )
}

/// Assigns the classifier arg-max when its probability reaches `conf_threshold`.
pub fn assign_conf_pla(pred: &ProbMap, conf_threshold: f64) -> Result<PseudoLabelMap> {
    if !(conf_threshold > 0.0 && conf_threshold <= 1.0) {
        return Err(Error::validation(format!(
            "confidence threshold {conf_threshold} outside (0, 1]"
        )));
    }
    let labels = (0..pred.num_pixels())
        .map(|i| {
            let c = pred.argmax(i);
            if pred.pixel(i)[c] >= conf_threshold {
                c as i32
            } else {
                IGNORE
            }
        })
        .collect();
    PseudoLabelMap::new(
        LabelMap::new(pred.height(), pred.width(), labels)?,
        conf_threshold,
        pred.classes(),
    )
}
