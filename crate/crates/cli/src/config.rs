//! Pipeline configuration: a TOML file with one table per block, overridable
//! per key from the command line.

use std::path::{Path, PathBuf};

use latent_selftrain::losses::Reduction;
use latent_selftrain::toyseg::AugmentConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Artifact directory.
    pub out: PathBuf,
    /// World directory; `<out>/world` when unset.
    pub world: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            world: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// One of figure1a, anisotropic, hard_regions, shifted.
    pub preset: String,
    /// JSON world spec replacing the preset.
    pub spec: Option<PathBuf>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub source_maps: Option<usize>,
    pub target_maps: Option<usize>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            preset: "shifted".into(),
            spec: None,
            height: None,
            width: None,
            source_maps: None,
            target_maps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: 16 }
    }
}

/// Feature space in which prototypes are built and pseudo labels assigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSpace {
    /// Encoder outputs of the warmup model.
    #[default]
    Latent,
    /// The raw per-pixel input vectors.
    Input,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesConfig {
    pub space: FeatureSpace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmConfig {
    /// Gaussians per class.
    pub k: usize,
    /// Log-density threshold for pseudo labels.
    pub delta: f64,
    pub cap: usize,
    pub var_floor: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub min_samples: usize,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            k: 8,
            delta: 0.0,
            cap: 300_000,
            var_floor: 1e-6,
            tol: 1e-6,
            max_iter: 100,
            min_samples: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansBlock {
    pub j: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for KMeansBlock {
    fn default() -> Self {
        Self {
            j: 64,
            tol: 1e-6,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub ema: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 1.0,
            lambda: 20.0,
            ema: 0.85,
            reduction: Reduction::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimBlock {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub warmup_iterations: usize,
    pub self_iterations: usize,
    pub batch_size: usize,
}

impl Default for OptimBlock {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            poly_power: 0.9,
            warmup_iterations: 600,
            self_iterations: 600,
            batch_size: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StmConfig {
    /// When false, every source pixel keeps weight 1.
    pub enabled: bool,
}

impl Default for StmConfig {
    fn default() -> Self {
        Self { enabled: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub world: u64,
    pub em: u64,
    pub kmeans: u64,
    pub train: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self::from_base(1)
    }
}

impl Seeds {
    pub fn from_base(base: u64) -> Self {
        Self {
            world: base,
            em: base.wrapping_add(1),
            kmeans: base.wrapping_add(2),
            train: base.wrapping_add(3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Density thresholds for the mixture assigner rows.
    pub maps_deltas: Vec<f64>,
    /// Distance thresholds for the centroid assigner rows.
    pub cas_thresholds: Vec<f64>,
    /// Confidence thresholds for the softmax assigner rows.
    pub conf_thresholds: Vec<f64>,
    /// Adds centroid and confidence rows whose thresholds match each mixture row's ratio.
    pub match_ratio: bool,
    pub sweep_deltas: Vec<f64>,
    pub sweep_ks: Vec<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            maps_deltas: vec![-5.0, 0.0, 5.0],
            cas_thresholds: vec![1.0, 2.0, f64::INFINITY],
            conf_thresholds: vec![0.5, 0.9, 0.99],
            match_ratio: true,
            sweep_deltas: vec![-10.0, 0.0, 5.0, 10.0],
            sweep_ks: vec![1, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub features: FeaturesConfig,
    pub gmm: GmmConfig,
    pub kmeans: KMeansBlock,
    pub loss: LossConfig,
    pub optim: OptimBlock,
    pub augment: AugmentConfig,
    pub stm: StmConfig,
    pub seeds: Seeds,
    pub bench: BenchConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `section.key` (dotted path of any depth) in a TOML table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Validation(vec![format!("override {assignment:?} is not key=value")]))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Validation(vec![format!("override key {path:?} is malformed")]));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Validation(vec![format!("override {path:?}: {k} is not a table")]))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl PipelineConfig {
    /// Reads an optional TOML file, applies overrides, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Validation(vec![format!("config {}: {e}", p.display())]))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| CliError::Validation(vec![format!("config {}: {e}", p.display())]))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Validation(vec![e.message().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks numeric ranges, reporting every bad field at once.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut bad = Vec::new();
        let mut check = |ok: bool, field: &str, msg: &str| {
            if !ok {
                bad.push(format!("{field}: {msg}"));
            }
        };
        let finite = |v: f64| v.is_finite();
        check(self.model.hidden >= 1, "model.hidden", "must be at least 1");
        check(self.gmm.k >= 1, "gmm.k", "must be at least 1");
        check(!self.gmm.delta.is_nan(), "gmm.delta", "must be a number");
        check(self.gmm.cap >= 1, "gmm.cap", "must be at least 1");
        check(self.gmm.var_floor > 0.0 && finite(self.gmm.var_floor), "gmm.var_floor", "must be positive");
        check(self.gmm.tol >= 0.0 && finite(self.gmm.tol), "gmm.tol", "must be ≥ 0");
        check(self.gmm.max_iter >= 1, "gmm.max_iter", "must be at least 1");
        check(self.kmeans.j >= 1, "kmeans.j", "must be at least 1");
        check(self.kmeans.tol >= 0.0 && finite(self.kmeans.tol), "kmeans.tol", "must be ≥ 0");
        check(self.kmeans.max_iter >= 1, "kmeans.max_iter", "must be at least 1");
        check(self.loss.alpha >= 0.0 && finite(self.loss.alpha), "loss.alpha", "must be ≥ 0");
        check(self.loss.beta >= 0.0 && finite(self.loss.beta), "loss.beta", "must be ≥ 0");
        check(self.loss.lambda >= 0.0 && finite(self.loss.lambda), "loss.lambda", "must be ≥ 0");
        check((0.0..=1.0).contains(&self.loss.ema), "loss.ema", "must be in [0, 1]");
        check(self.optim.lr > 0.0 && finite(self.optim.lr), "optim.lr", "must be positive");
        check((0.0..1.0).contains(&self.optim.momentum), "optim.momentum", "must be in [0, 1)");
        check(
            self.optim.weight_decay >= 0.0 && finite(self.optim.weight_decay),
            "optim.weight_decay",
            "must be ≥ 0",
        );
        check(self.optim.poly_power > 0.0 && finite(self.optim.poly_power), "optim.poly_power", "must be positive");
        check(self.optim.batch_size >= 1, "optim.batch_size", "must be at least 1");
        check(
            self.augment.noise_scale >= 0.0 && finite(self.augment.noise_scale),
            "augment.noise_scale",
            "must be ≥ 0",
        );
        check(
            (0.0..=1.0).contains(&self.augment.cutout_fraction),
            "augment.cutout_fraction",
            "must be in [0, 1]",
        );
        for (name, v) in [
            ("world.height", self.world.height),
            ("world.width", self.world.width),
            ("world.source_maps", self.world.source_maps),
            ("world.target_maps", self.world.target_maps),
        ] {
            check(v != Some(0), name, "must be positive");
        }
        check(self.bench.maps_deltas.iter().all(|d| !d.is_nan()), "bench.maps_deltas", "must be numbers");
        check(
            self.bench.cas_thresholds.iter().all(|t| *t >= 0.0),
            "bench.cas_thresholds",
            "must be ≥ 0",
        );
        check(
            self.bench.conf_thresholds.iter().all(|t| *t > 0.0 && *t <= 1.0),
            "bench.conf_thresholds",
            "must be in (0, 1]",
        );
        check(self.bench.sweep_deltas.iter().all(|d| !d.is_nan()), "bench.sweep_deltas", "must be numbers");
        check(self.bench.sweep_ks.iter().all(|&k| k >= 1), "bench.sweep_ks", "must be at least 1");
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CliError::Validation(bad))
        }
    }

    pub fn out_dir(&self) -> &Path {
        &self.paths.out
    }

    pub fn world_dir(&self) -> PathBuf {
        self.paths.world.clone().unwrap_or_else(|| self.paths.out.join("world"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn overrides_parse_typed_values() {
        let cfg = PipelineConfig::load(
            None,
            &[
                "gmm.k=3".into(),
                "gmm.delta=-2.5".into(),
                "world.preset=figure1a".into(),
                "bench.sweep_ks=[1,2]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.gmm.k, 3);
        assert_eq!(cfg.gmm.delta, -2.5);
        assert_eq!(cfg.world.preset, "figure1a");
        assert_eq!(cfg.bench.sweep_ks, vec![1, 2]);
    }

    #[test]
    fn every_bad_field_is_reported() {
        let err = PipelineConfig::load(None, &["gmm.k=0".into(), "loss.ema=2.0".into(), "optim.lr=-1".into()])
            .unwrap_err();
        match err {
            CliError::Validation(v) => {
                assert_eq!(v.len(), 3, "{v:?}");
                assert!(v.iter().any(|m| m.starts_with("gmm.k")));
                assert!(v.iter().any(|m| m.starts_with("loss.ema")));
                assert!(v.iter().any(|m| m.starts_with("optim.lr")));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            PipelineConfig::load(None, &["gmm.kk=3".into()]),
            Err(CliError::Validation(_))
        ));
    }
}
