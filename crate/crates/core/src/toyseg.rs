//! A per-pixel segmentor: one tanh hidden layer (the encoder, whose outputs form the
//! latent space) followed by a linear softmax classifier.
//!
//! Gradients are backpropagated by hand. Batches are whole maps; within a batch the
//! per-pixel work is split into fixed-size chunks whose partial gradients are summed
//! in chunk order, so results do not depend on the worker count.

use std::fmt::Write as _;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{FeatureMap, LabelMap, ModelFile, ProbMap};
use crate::error::{Error, Result};
use crate::losses::{self, Reduction, SceWeights};
use crate::math::softmax_in_place;
use crate::pla::PseudoLabelMap;
use crate::stm::TransferabilityMap;

const CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    input_dim: usize,
    hidden: usize,
    classes: usize,
    /// Encoder weights (hidden × input), encoder biases, classifier weights
    /// (classes × hidden), classifier biases; flattened in that order.
    params: Vec<f64>,
}

impl ModelFile for ToyModel {
    const KIND: &'static str = "toy_model";

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.classes < 2 {
            return Err(Error::validation("toy model needs input, hidden and ≥2 class units"));
        }
        if self.params.len() != Self::param_count(self.input_dim, self.hidden, self.classes) {
            return Err(Error::Length {
                expected: Self::param_count(self.input_dim, self.hidden, self.classes),
                found: self.params.len(),
            });
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite model parameter".into()));
        }
        Ok(())
    }
}

impl ToyModel {
    fn param_count(d: usize, h: usize, c: usize) -> usize {
        h * d + h + c * h + c
    }

    /// All-zero parameters.
    pub fn zeros(input_dim: usize, hidden: usize, classes: usize) -> Result<Self> {
        let m = Self {
            input_dim,
            hidden,
            classes,
            params: vec![0.0; Self::param_count(input_dim, hidden, classes)],
        };
        m.validate()?;
        if hidden < classes {
            warn!("hidden width {hidden} is below the class count {classes}");
        }
        Ok(m)
    }

    /// Seeded Gaussian initialization scaled by fan-in; biases start at zero.
    pub fn init(input_dim: usize, hidden: usize, classes: usize, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(input_dim, hidden, classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Normal::new(0.0, (1.0 / input_dim as f64).sqrt()).expect("positive std");
        let cls = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("positive std");
        let (w1, w2) = (m.w1_range(), m.w2_range());
        for p in &mut m.params[w1] {
            *p = enc.sample(&mut rng);
        }
        for p in &mut m.params[w2] {
            *p = cls.sample(&mut rng);
        }
        Ok(m)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn w1_range(&self) -> std::ops::Range<usize> {
        0..self.hidden * self.input_dim
    }

    fn b1_range(&self) -> std::ops::Range<usize> {
        let s = self.hidden * self.input_dim;
        s..s + self.hidden
    }

    fn w2_range(&self) -> std::ops::Range<usize> {
        let s = self.hidden * self.input_dim + self.hidden;
        s..s + self.classes * self.hidden
    }

    fn b2_range(&self) -> std::ops::Range<usize> {
        let s = self.hidden * self.input_dim + self.hidden + self.classes * self.hidden;
        s..s + self.classes
    }

    /// Sets classifier bias `class` (test and fixture helper).
    pub fn set_classifier_bias(&mut self, class: usize, value: f64) {
        let r = self.b2_range();
        self.params[r][class] = value;
    }

    fn check_input(&self, feat: &FeatureMap) -> Result<()> {
        if feat.dim() != self.input_dim {
            return Err(Error::shape(format!(
                "input has dimension {}, model expects {}",
                feat.dim(),
                self.input_dim
            )));
        }
        Ok(())
    }

    /// Hidden activations and class probabilities for `n` rows of input.
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (d, h, c) = (self.input_dim, self.hidden, self.classes);
        let n = x.len() / d;
        let mut hid = vec![0.0; n * h];
        let mut probs = vec![0.0; n * c];
        let w1 = &self.params[self.w1_range()];
        let b1 = &self.params[self.b1_range()];
        let w2 = &self.params[self.w2_range()];
        let b2 = &self.params[self.b2_range()];
        x.par_chunks(CHUNK * d)
            .zip(hid.par_chunks_mut(CHUNK * h))
            .zip(probs.par_chunks_mut(CHUNK * c))
            .for_each(|((xs, hs), ps)| {
                for ((xi, hi), pi) in xs.chunks_exact(d).zip(hs.chunks_exact_mut(h)).zip(ps.chunks_exact_mut(c)) {
                    for (k, hk) in hi.iter_mut().enumerate() {
                        let row = &w1[k * d..(k + 1) * d];
                        let a: f64 = b1[k] + row.iter().zip(xi).map(|(w, v)| w * v).sum::<f64>();
                        *hk = a.tanh();
                    }
                    for (j, pj) in pi.iter_mut().enumerate() {
                        let row = &w2[j * h..(j + 1) * h];
                        *pj = b2[j] + row.iter().zip(hi.iter()).map(|(w, v)| w * v).sum::<f64>();
                    }
                    softmax_in_place(pi);
                }
            });
        (hid, probs)
    }

    /// Parameter gradient given the loss gradient with respect to the logits.
    fn backward(&self, x: &[f64], hid: &[f64], dlogits: &[f64]) -> Vec<f64> {
        let (d, h, c) = (self.input_dim, self.hidden, self.classes);
        let w2 = &self.params[self.w2_range()];
        let (w1r, b1r, w2r, b2r) = (self.w1_range(), self.b1_range(), self.w2_range(), self.b2_range());
        let partials: Vec<Vec<f64>> = x
            .par_chunks(CHUNK * d)
            .zip(hid.par_chunks(CHUNK * h))
            .zip(dlogits.par_chunks(CHUNK * c))
            .map(|((xs, hs), gs)| {
                let mut g = vec![0.0; self.params.len()];
                let mut dh = vec![0.0; h];
                for ((xi, hi), gi) in xs.chunks_exact(d).zip(hs.chunks_exact(h)).zip(gs.chunks_exact(c)) {
                    if gi.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    dh.iter_mut().for_each(|v| *v = 0.0);
                    for (j, &gj) in gi.iter().enumerate() {
                        if gj == 0.0 {
                            continue;
                        }
                        let wrow = &w2[j * h..(j + 1) * h];
                        let grow = &mut g[w2r.start + j * h..w2r.start + (j + 1) * h];
                        for k in 0..h {
                            grow[k] += gj * hi[k];
                            dh[k] += gj * wrow[k];
                        }
                        g[b2r.start + j] += gj;
                    }
                    for k in 0..h {
                        let da = dh[k] * (1.0 - hi[k] * hi[k]);
                        if da == 0.0 {
                            continue;
                        }
                        let grow = &mut g[w1r.start + k * d..w1r.start + (k + 1) * d];
                        for (gv, &xv) in grow.iter_mut().zip(xi) {
                            *gv += da * xv;
                        }
                        g[b1r.start + k] += da;
                    }
                }
                g
            })
            .collect();
        let mut total = vec![0.0; self.params.len()];
        for p in partials {
            for (t, v) in total.iter_mut().zip(p) {
                *t += v;
            }
        }
        total
    }

    /// Class probabilities and encoder features for every pixel.
    pub fn predict(&self, feat: &FeatureMap) -> Result<(ProbMap, FeatureMap)> {
        self.check_input(feat)?;
        let x: Vec<f64> = feat.data().iter().map(|&v| v as f64).collect();
        let (hid, probs) = self.forward(&x);
        let pm = ProbMap::new(feat.height(), feat.width(), self.classes, probs)?;
        let fm = FeatureMap::new(
            feat.height(),
            feat.width(),
            self.hidden,
            hid.into_iter().map(|v| v as f32).collect(),
        )?;
        Ok((pm, fm))
    }

    /// Cross-entropy over the pixels of `maps` and its parameter gradient, without
    /// weight decay.
    pub fn ce_loss_and_grad(&self, maps: &[(&FeatureMap, &LabelMap)], reduction: Reduction) -> Result<(f64, Vec<f64>)> {
        let mut x = Vec::new();
        let mut labels = Vec::new();
        for (f, l) in maps {
            self.check_input(f)?;
            if f.height() != l.height() || f.width() != l.width() {
                return Err(Error::shape("features and labels differ in size"));
            }
            x.extend(f.data().iter().map(|&v| v as f64));
            labels.extend_from_slice(l.labels());
        }
        let (hid, probs) = self.forward(&x);
        let ones = vec![1.0; labels.len()];
        let (loss, dl) = losses::weighted_ce_rows(&probs, self.classes, &labels, &ones, reduction)?;
        Ok((loss, self.backward(&x, &hid, &dl)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub iterations: usize,
    /// Whole maps per batch.
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            poly_power: 0.9,
            iterations: 1000,
            batch_size: 4,
        }
    }
}

impl OptimConfig {
    /// Poly-decayed learning rate at step `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        if self.iterations == 0 {
            return self.lr;
        }
        let frac = (t as f64 / self.iterations as f64).min(1.0);
        self.lr * (1.0 - frac).powf(self.poly_power)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be ≥ 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be ≥ 0".into()));
        }
        if !(self.poly_power > 0.0) {
            return Err(Error::Config("poly power must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// SGD with momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(num_params: usize, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: vec![0.0; num_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        for ((p, v), &g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + g + self.weight_decay * *p;
            *p -= lr * *v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Standard deviation of the additive Gaussian jitter.
    pub noise_scale: f64,
    /// Fraction of the map area zeroed by one rectangular block.
    pub cutout_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_scale: 0.3,
            cutout_fraction: 0.1,
        }
    }
}

/// Seeded feature-space augmentation: Gaussian jitter plus one zeroed block.
pub fn augment(feat: &FeatureMap, seed: u64, cfg: &AugmentConfig) -> Result<FeatureMap> {
    if !(cfg.noise_scale >= 0.0) || !(0.0..=1.0).contains(&cfg.cutout_fraction) {
        return Err(Error::validation("augmentation scale must be ≥ 0 and cutout fraction in [0, 1]"));
    }
    let mut out = feat.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if cfg.noise_scale > 0.0 {
        let n = Normal::new(0.0, cfg.noise_scale).expect("positive std");
        for i in 0..out.num_pixels() {
            for v in out.pixel_mut(i) {
                *v += n.sample(&mut rng) as f32;
            }
        }
    }
    if cfg.cutout_fraction > 0.0 {
        let side = cfg.cutout_fraction.sqrt();
        let (h, w) = (feat.height(), feat.width());
        let bh = ((h as f64 * side).round() as usize).clamp(1, h);
        let bw = ((w as f64 * side).round() as usize).clamp(1, w);
        let top = rng.random_range(0..=h - bh);
        let left = rng.random_range(0..=w - bw);
        for r in top..top + bh {
            for c in left..left + bw {
                out.pixel_mut(r * w + c).iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub seed: u64,
    /// Consistency weight.
    pub lambda: f64,
    /// EMA smoothing coefficient of the teacher.
    pub ema: f64,
    pub sce: SceWeights,
    pub augment: AugmentConfig,
    pub reduction: Reduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            seed: 0,
            lambda: 20.0,
            ema: 0.999,
            sce: SceWeights::default(),
            augment: AugmentConfig::default(),
            reduction: Reduction::Mean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("λ must be ≥ 0".into()));
        }
        if !(0.0..=1.0).contains(&self.ema) {
            return Err(Error::Config("EMA coefficient outside [0, 1]".into()));
        }
        if !(self.sce.alpha >= 0.0 && self.sce.beta >= 0.0) {
            return Err(Error::Config("SCE coefficients must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Loss breakdown of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub sce: f64,
    pub consist: f64,
    pub total: f64,
}

pub fn step_log_csv(rows: &[StepLog]) -> String {
    let mut s = String::from("step,lr,ce,sce,consist,total\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            r.step, r.lr, r.ce, r.sce, r.consist, r.total
        );
    }
    s
}

/// Draws batches of map indices epoch by epoch from a seeded shuffle.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            cursor: n,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

const TARGET_STREAM: u64 = 0x7A3D_19C5_0B6E_F241;
const AUGMENT_STREAM: u64 = 0x51C8_E2A0_94D3_7B1F;

fn flatten(maps: &[&FeatureMap]) -> Vec<f64> {
    maps.iter()
        .flat_map(|m| m.data().iter().map(|&v| v as f64))
        .collect()
}

fn add_scaled(acc: &mut [f64], g: &[f64], s: f64) {
    for (a, v) in acc.iter_mut().zip(g) {
        *a += s * v;
    }
}

fn check_finite(model: &ToyModel, step: usize) -> Result<()> {
    if model.params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numeric(format!("parameters diverged at step {step}")));
    }
    Ok(())
}

/// Supervised training on labeled source maps.
pub fn train_warmup(
    model: &ToyModel,
    source: &[(FeatureMap, LabelMap)],
    cfg: &TrainConfig,
) -> Result<(ToyModel, Vec<StepLog>)> {
    let ones: Vec<TransferabilityMap> = source.iter().map(|(_, l)| TransferabilityMap::uniform(l)).collect();
    let src: Vec<SourceItem> = source
        .iter()
        .zip(&ones)
        .map(|((f, l), w)| SourceItem { features: f, labels: l, weights: w })
        .collect();
    let out = run_training(model, &src, &[], cfg, 0.0)?;
    Ok((out.student, out.log))
}

/// A source map with its transferability weights.
#[derive(Debug, Clone, Copy)]
pub struct SourceItem<'a> {
    pub features: &'a FeatureMap,
    pub labels: &'a LabelMap,
    pub weights: &'a TransferabilityMap,
}

/// A target map with its pseudo labels.
#[derive(Debug, Clone, Copy)]
pub struct TargetItem<'a> {
    pub features: &'a FeatureMap,
    pub pseudo: &'a PseudoLabelMap,
}

#[derive(Debug, Clone)]
pub struct SelfTrainOutcome {
    pub student: ToyModel,
    pub teacher: ToyModel,
    pub log: Vec<StepLog>,
}

/// Self-training: transferability-weighted source cross-entropy, symmetric
/// cross-entropy on target pseudo labels, and consistency between the student
/// and its EMA teacher on augmented target maps.
pub fn train_self(
    model: &ToyModel,
    source: &[SourceItem<'_>],
    target: &[TargetItem<'_>],
    cfg: &TrainConfig,
) -> Result<SelfTrainOutcome> {
    run_training(model, source, target, cfg, cfg.lambda)
}

fn run_training(
    model: &ToyModel,
    source: &[SourceItem<'_>],
    target: &[TargetItem<'_>],
    cfg: &TrainConfig,
    lambda: f64,
) -> Result<SelfTrainOutcome> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::EmptyInput("no source maps to train on".into()));
    }
    for s in source {
        model.check_input(s.features)?;
        let (h, w) = (s.features.height(), s.features.width());
        if s.labels.height() != h || s.labels.width() != w {
            return Err(Error::shape("source features and labels differ in size"));
        }
        if s.weights.height != h || s.weights.width != w {
            return Err(Error::Config("transferability map does not match its source map".into()));
        }
        s.labels.check_classes(model.classes)?;
    }
    for t in target {
        model.check_input(t.features)?;
        let l = t.pseudo.labels();
        if l.height() != t.features.height() || l.width() != t.features.width() {
            return Err(Error::Config("pseudo labels do not match their target map".into()));
        }
        l.check_classes(model.classes)?;
    }

    let opt = &cfg.optim;
    let mut student = model.clone();
    let mut teacher = model.clone();
    let mut sgd = Sgd::new(student.params.len(), opt.momentum, opt.weight_decay);
    let mut src_batches = BatchSampler::new(source.len(), cfg.seed);
    let mut tgt_batches = BatchSampler::new(target.len(), cfg.seed ^ TARGET_STREAM);
    let mut log = Vec::with_capacity(opt.iterations);
    let c = student.classes;

    for step in 0..opt.iterations {
        let lr = opt.lr_at(step);
        let mut grad = vec![0.0; student.params.len()];

        let idx = src_batches.next(opt.batch_size);
        let feats: Vec<&FeatureMap> = idx.iter().map(|&i| source[i].features).collect();
        let x = flatten(&feats);
        let labels: Vec<i32> = idx.iter().flat_map(|&i| source[i].labels.labels().iter().copied()).collect();
        let weights: Vec<f64> = idx.iter().flat_map(|&i| source[i].weights.weights.iter().copied()).collect();
        let (hid, probs) = student.forward(&x);
        let (ce, dl) = losses::weighted_ce_rows(&probs, c, &labels, &weights, cfg.reduction)?;
        add_scaled(&mut grad, &student.backward(&x, &hid, &dl), 1.0);

        let (mut sce, mut consist) = (0.0, 0.0);
        if !target.is_empty() {
            let idx = tgt_batches.next(opt.batch_size);
            let feats: Vec<&FeatureMap> = idx.iter().map(|&i| target[i].features).collect();
            let x = flatten(&feats);
            let pls: Vec<i32> = idx
                .iter()
                .flat_map(|&i| target[i].pseudo.labels().labels().iter().copied())
                .collect();
            let (hid, probs) = student.forward(&x);
            let (v, dl) = losses::sce_rows(&probs, c, &pls, cfg.sce, cfg.reduction)?;
            sce = v;
            add_scaled(&mut grad, &student.backward(&x, &hid, &dl), 1.0);

            if lambda > 0.0 {
                let aug_seed = cfg.seed ^ AUGMENT_STREAM ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                let augmented = feats
                    .iter()
                    .enumerate()
                    .map(|(k, f)| augment(f, aug_seed.wrapping_add(k as u64), &cfg.augment))
                    .collect::<Result<Vec<_>>>()?;
                let x = flatten(&augmented.iter().collect::<Vec<_>>());
                let (hid, probs) = student.forward(&x);
                let (_, tprobs) = teacher.forward(&x);
                let (v, dl) = losses::kld_rows(&probs, &tprobs, c, cfg.reduction)?;
                consist = v;
                add_scaled(&mut grad, &student.backward(&x, &hid, &dl), lambda);
            }
        }

        sgd.step(&mut student.params, &grad, lr);
        check_finite(&student, step)?;
        if !target.is_empty() {
            losses::ema_update(&mut teacher.params, &student.params, cfg.ema)?;
        }
        log.push(StepLog {
            step,
            lr,
            ce,
            sce,
            consist,
            total: ce + sce + lambda * consist,
        });
    }
    Ok(SelfTrainOutcome { student, teacher, log })
}
