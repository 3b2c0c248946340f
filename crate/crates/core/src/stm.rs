//! Source transferability maps.
//!
//! A source pixel's weight decays with its distance to the nearest target prototype,
//! halving at the dataset mean distance, and is floored by the normalized entropy of
//! its class on the target domain so that uncertain (usually rare) classes keep
//! some weight:
//!
//! `w = min(2^(−D² / d_mean²) + e′_c, 1)`

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rayon::prelude::*;

use crate::clustering::PrototypeSet;
use crate::dataio::{self, FeatureMap, LabelMap, ProbMap, IGNORE};
use crate::error::{Error, Result};

/// Floor applied to the mean distance so the decay term stays defined.
pub const MIN_MEAN_DISTANCE: f64 = 1e-12;

/// Per-class entropy of target predictions, raw and min-max normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyStats {
    /// Mean Shannon entropy per class; `None` for classes with no pixels.
    pub mean_entropy: Vec<Option<f64>>,
    /// Normalized entropy in `[0, 1]`; absent classes get 1.
    pub normalized: Vec<f64>,
    pub counts: Vec<u64>,
}

impl EntropyStats {
    pub fn num_classes(&self) -> usize {
        self.normalized.len()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,pixels,mean_entropy,normalized_entropy\n");
        for c in 0..self.num_classes() {
            let e = self.mean_entropy[c].map(|e| format!("{e:.9}")).unwrap_or_default();
            let _ = writeln!(s, "{c},{},{e},{:.9}", self.counts[c], self.normalized[c]);
        }
        s
    }
}

fn entropy(p: &[f64], log: impl Fn(f64) -> f64) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * log(v)).sum::<f64>()
}

/// Per-class entropy statistics in nats.
pub fn class_entropy(preds: &[ProbMap], pls: &[LabelMap], num_classes: usize) -> Result<EntropyStats> {
    class_entropy_with(preds, pls, num_classes, f64::ln)
}

/// As [`class_entropy`], with entropies measured in an arbitrary logarithm base.
pub fn class_entropy_in_base(
    preds: &[ProbMap],
    pls: &[LabelMap],
    num_classes: usize,
    base: f64,
) -> Result<EntropyStats> {
    if !(base > 0.0 && base != 1.0) {
        return Err(Error::validation(format!("invalid logarithm base {base}")));
    }
    let lb = base.ln();
    class_entropy_with(preds, pls, num_classes, move |v| v.ln() / lb)
}

fn class_entropy_with(
    preds: &[ProbMap],
    pls: &[LabelMap],
    num_classes: usize,
    log: impl Fn(f64) -> f64 + Copy,
) -> Result<EntropyStats> {
    if preds.len() != pls.len() {
        return Err(Error::shape(format!(
            "{} prediction maps paired with {} label maps",
            preds.len(),
            pls.len()
        )));
    }
    let mut sums = vec![0.0; num_classes];
    let mut counts = vec![0u64; num_classes];
    for (p, l) in preds.iter().zip(pls) {
        if p.height() != l.height() || p.width() != l.width() {
            return Err(Error::shape("prediction and pseudo-label maps differ in size"));
        }
        if p.classes() != num_classes {
            return Err(Error::shape(format!(
                "prediction has {} classes, expected {num_classes}",
                p.classes()
            )));
        }
        l.check_classes(num_classes)?;
        for i in 0..p.num_pixels() {
            if let Some(c) = l.get(i) {
                sums[c] += entropy(p.pixel(i), log);
                counts[c] += 1;
            }
        }
    }
    if counts.iter().all(|&n| n == 0) {
        return Err(Error::EmptyInput("no pseudo-labeled pixels to measure entropy on".into()));
    }
    let mean_entropy: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
        .collect();
    let present = mean_entropy.iter().flatten().copied();
    let (lo, hi) = present.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| {
        (lo.min(e), hi.max(e))
    });
    let range = hi - lo;
    let zero_range = range <= 1e-12 * hi.abs().max(1.0);
    let normalized = mean_entropy
        .iter()
        .map(|e| match e {
            None => 1.0,
            Some(_) if zero_range => 0.0,
            Some(e) => ((e - lo) / range).clamp(0.0, 1.0),
        })
        .collect();
    Ok(EntropyStats {
        mean_entropy,
        normalized,
        counts,
    })
}

/// Per-pixel distance to the nearest target prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

pub fn distance_map(feat: &FeatureMap, protos: &PrototypeSet) -> Result<DistanceMap> {
    if feat.dim() != protos.dim() {
        return Err(Error::shape(format!(
            "features have dimension {}, prototypes have {}",
            feat.dim(),
            protos.dim()
        )));
    }
    let values = (0..feat.num_pixels())
        .into_par_iter()
        .map(|i| protos.nearest(&feat.pixel_f64(i)).1.sqrt())
        .collect();
    Ok(DistanceMap {
        height: feat.height(),
        width: feat.width(),
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanDistance {
    pub value: f64,
    /// Set when the pooled mean was zero and the floor took over.
    pub degenerate: bool,
}

/// Mean of all pixel distances in the dataset. With `labels`, ignore-labeled
/// pixels are left out of the pool.
pub fn mean_distance(dmaps: &[DistanceMap], labels: Option<&[LabelMap]>) -> Result<MeanDistance> {
    if let Some(ls) = labels {
        if ls.len() != dmaps.len() {
            return Err(Error::shape("distance maps and label maps differ in count"));
        }
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (idx, d) in dmaps.iter().enumerate() {
        let mask = labels.map(|ls| &ls[idx]);
        if let Some(m) = mask {
            if m.height() != d.height || m.width() != d.width {
                return Err(Error::shape("distance map and label map differ in size"));
            }
        }
        for (i, &v) in d.values.iter().enumerate() {
            if mask.is_none_or(|m| m.labels()[i] != IGNORE) {
                sum += v;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyInput("no pixels to average distances over".into()));
    }
    let value = sum / n as f64;
    if value < MIN_MEAN_DISTANCE {
        warn!("mean source-to-target distance is {value}; using floor {MIN_MEAN_DISTANCE}");
        return Ok(MeanDistance {
            value: MIN_MEAN_DISTANCE,
            degenerate: true,
        });
    }
    Ok(MeanDistance {
        value,
        degenerate: false,
    })
}

/// Per-pixel source weights; ignore-labeled pixels hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferabilityMap {
    pub height: usize,
    pub width: usize,
    pub weights: Vec<f64>,
}

impl TransferabilityMap {
    /// All-ones map, i.e. no reweighting.
    pub fn uniform(labels: &LabelMap) -> Self {
        Self {
            height: labels.height(),
            width: labels.width(),
            weights: labels
                .labels()
                .iter()
                .map(|&l| if l == IGNORE { 0.0 } else { 1.0 })
                .collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        dataio::save_weight_grid(path, self.height, self.width, &self.weights)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (height, width, weights) = dataio::load_weight_grid(path)?;
        if weights.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
            return Err(Error::validation("transferability weight outside [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            weights,
        })
    }
}

/// The transferability weight of one pixel.
#[inline]
pub fn transferability(distance: f64, d_mean: f64, floor: f64) -> f64 {
    let r = distance / d_mean;
    ((-(r * r)).exp2() + floor).min(1.0)
}

pub fn transferability_map(
    dmap: &DistanceMap,
    gt: &LabelMap,
    stats: &EntropyStats,
    d_mean: f64,
) -> Result<TransferabilityMap> {
    if dmap.height != gt.height() || dmap.width != gt.width() {
        return Err(Error::shape("distance map and labels differ in size"));
    }
    if !(d_mean > 0.0) || !d_mean.is_finite() {
        return Err(Error::validation(format!("mean distance {d_mean} must be positive")));
    }
    let weights = dmap
        .values
        .iter()
        .zip(gt.labels())
        .map(|(&d, &l)| {
            if l == IGNORE {
                return Ok(0.0);
            }
            let floor = stats
                .normalized
                .get(l as usize)
                .ok_or(Error::UnknownClass {
                    label: l,
                    classes: stats.num_classes(),
                })?;
            Ok(transferability(d, d_mean, *floor))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransferabilityMap {
        height: dmap.height,
        width: dmap.width,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(norm: Vec<f64>) -> EntropyStats {
        EntropyStats {
            mean_entropy: norm.iter().map(|&v| Some(v)).collect(),
            counts: vec![1; norm.len()],
            normalized: norm,
        }
    }

    #[test]
    fn spot_values() {
        assert_eq!(transferability(0.0, 3.0, 0.0), 1.0);
        assert_eq!(transferability(3.0, 3.0, 0.0), 0.5);
        assert!((transferability(30.0, 3.0, 0.3) - 0.3).abs() < 1e-9);
        assert_eq!(transferability(0.0, 3.0, 0.7), 1.0);
    }

    #[test]
    fn map_respects_ignore_and_unknown_class() {
        let d = DistanceMap {
            height: 1,
            width: 3,
            values: vec![0.0, 2.0, 1.0],
        };
        let gt = LabelMap::new(1, 3, vec![0, 1, IGNORE]).unwrap();
        let w = transferability_map(&d, &gt, &stats(vec![0.0, 0.25]), 2.0).unwrap();
        assert_eq!(w.weights, vec![1.0, 0.75, 0.0]);
        let bad = LabelMap::new(1, 3, vec![0, 2, 0]).unwrap();
        assert!(matches!(
            transferability_map(&d, &bad, &stats(vec![0.0, 0.25]), 2.0),
            Err(Error::UnknownClass { label: 2, .. })
        ));
        assert!(transferability_map(&d, &gt, &stats(vec![0.0, 0.25]), 0.0).is_err());
    }

    #[test]
    fn entropy_endpoints() {
        // class 0 pixels uniform, class 1 pixels one-hot
        let p = ProbMap::new(1, 2, 2, vec![0.5, 0.5, 0.0, 1.0]).unwrap();
        let l = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        let s = class_entropy(&[p], &[l], 2).unwrap();
        assert_eq!(s.normalized, vec![1.0, 0.0]);
        assert!((s.mean_entropy[0].unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn single_present_class_and_absent_class() {
        let p = ProbMap::new(1, 2, 3, vec![0.2, 0.3, 0.5, 0.1, 0.1, 0.8]).unwrap();
        let l = LabelMap::new(1, 2, vec![0, 0]).unwrap();
        let s = class_entropy(&[p], &[l], 3).unwrap();
        assert_eq!(s.normalized, vec![0.0, 1.0, 1.0]);
        assert_eq!(s.counts, vec![2, 0, 0]);
    }

    #[test]
    fn no_labeled_pixels_is_an_error() {
        let p = ProbMap::new(1, 1, 2, vec![0.5, 0.5]).unwrap();
        let l = LabelMap::filled(1, 1, IGNORE);
        assert!(matches!(class_entropy(&[p], &[l], 2), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn mean_distance_examples() {
        let m = |v: Vec<f64>| DistanceMap {
            height: 1,
            width: v.len(),
            values: v,
        };
        assert_eq!(mean_distance(&[m(vec![2.0, 2.0])], None).unwrap().value, 2.0);
        assert_eq!(mean_distance(&[m(vec![0.0]), m(vec![4.0])], None).unwrap().value, 2.0);
        let z = mean_distance(&[m(vec![0.0, 0.0])], None).unwrap();
        assert!(z.degenerate);
        assert_eq!(z.value, MIN_MEAN_DISTANCE);
        assert!(mean_distance(&[], None).is_err());
        let mask = [LabelMap::new(1, 2, vec![0, IGNORE]).unwrap()];
        assert_eq!(
            mean_distance(&[m(vec![1.0, 100.0])], Some(&mask)).unwrap().value,
            1.0
        );
    }

    #[test]
    fn distance_map_examples() {
        let protos = PrototypeSet::new(vec![vec![0.0, 0.0]]).unwrap();
        let f = FeatureMap::new(1, 2, 2, vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        assert_eq!(distance_map(&f, &protos).unwrap().values, vec![5.0, 0.0]);
        assert!(distance_map(&FeatureMap::zeros(1, 1, 3), &protos).is_err());
    }
}
