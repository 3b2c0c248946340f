//! Pipeline commands. Each command reads its prerequisites from the output
//! directory, writes its artifacts there, and returns an in-memory summary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use latent_selftrain::clustering::{kmeans, KMeansConfig, PrototypeSet};
use latent_selftrain::dataio::{load_model, save_model, Encoding, FeatureMap, FeatureSet, LabelMap, ProbMap};
use latent_selftrain::gmm::{EmConfig, MapsModel};
use latent_selftrain::losses::SceWeights;
use latent_selftrain::pla::{
    self, assign_cas_pla, assign_conf_pla, assign_maps_pla, build_maps, CentroidModel, MapsBuildConfig,
    PseudoLabelMap, SourceSample,
};
use latent_selftrain::stm::{self, EntropyStats, MeanDistance, TransferabilityMap};
use latent_selftrain::synthbench::{evaluate_all, generate_world, EvalReport, World, WorldSpec};
use latent_selftrain::toyseg::{
    self, step_log_csv, OptimConfig, SourceItem, TargetItem, ToyModel, TrainConfig,
};
use log::info;

use crate::config::{FeatureSpace, PipelineConfig};
use crate::error::{CliError, CliResult};

pub const WARMUP_MODEL: &str = "warmup.model";
pub const MAPS_MODEL: &str = "maps.model";
pub const CENTROID_MODEL: &str = "centroids.model";
pub const TARGET_PROTOS: &str = "target_protos.model";
pub const SELFTRAIN_MODEL: &str = "selftrain.model";
pub const PL_DIR: &str = "pl";
pub const STM_DIR: &str = "stm";

fn f(v: f64) -> String {
    format!("{v:.6}")
}

fn opt(v: Option<f64>) -> String {
    v.map(f).unwrap_or_default()
}

/// Per-map model outputs: class probabilities and the configured feature space.
struct Outputs {
    probs: Vec<ProbMap>,
    features: Vec<FeatureMap>,
}

/// The world and warmup model outputs shared by downstream commands.
struct Context {
    world: World,
    warmup: ToyModel,
    source: Outputs,
    target: Outputs,
}

impl Context {
    fn classes(&self) -> usize {
        self.world.num_classes()
    }

    fn source_samples(&self) -> Vec<SourceSample> {
        self.world
            .source
            .iter()
            .zip(self.source.probs.iter().zip(&self.source.features))
            .map(|(m, (p, f))| SourceSample {
                features: f.clone(),
                pred: p.clone(),
                labels: m.labels.clone(),
            })
            .collect()
    }
}

/// Outcome of the pseudo-label, transferability and retraining chain for one setting.
#[derive(Debug, Clone)]
pub struct ChainResult {
    pub pl_ratio: f64,
    pub pl_accuracy: Option<f64>,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    pub cfg: PipelineConfig,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Self {
        Self { cfg }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.out_dir().join(name)
    }

    fn write(&self, name: &str, contents: &str) -> CliResult<()> {
        let path = self.out(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, contents)?;
        Ok(())
    }

    fn require(&self, path: &Path, producer: &'static str) -> CliResult<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(CliError::Prerequisite {
                artifact: path.to_path_buf(),
                producer,
            })
        }
    }

    fn load<M: latent_selftrain::dataio::ModelFile>(&self, name: &str, producer: &'static str) -> CliResult<M> {
        let path = self.out(name);
        self.require(&path, producer)?;
        Ok(load_model(&path)?)
    }

    fn save<M: latent_selftrain::dataio::ModelFile>(&self, model: &M, name: &str) -> CliResult<()> {
        fs::create_dir_all(self.cfg.out_dir())?;
        Ok(save_model(model, self.out(name), Encoding::Text)?)
    }

    pub fn world_spec(&self) -> CliResult<WorldSpec> {
        let w = &self.cfg.world;
        let mut spec = match &w.spec {
            Some(path) => {
                let text = fs::read_to_string(path)?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Validation(vec![format!("world.spec {}: {e}", path.display())]))?
            }
            None => WorldSpec::preset(&w.preset, self.cfg.seeds.world)
                .map_err(|e| CliError::Validation(vec![format!("world.preset: {e}")]))?,
        };
        if w.spec.is_some() {
            spec.seed = self.cfg.seeds.world;
        }
        if let Some(v) = w.height {
            spec.height = v;
        }
        if let Some(v) = w.width {
            spec.width = v;
        }
        if let Some(v) = w.source_maps {
            spec.source_maps = v;
        }
        if let Some(v) = w.target_maps {
            spec.target_maps = v;
        }
        spec.validate()
            .map_err(|e| CliError::Validation(vec![format!("world: {e}")]))?;
        Ok(spec)
    }

    fn world(&self) -> CliResult<World> {
        let dir = self.cfg.world_dir();
        self.require(&World::manifest_path(&dir), "gen-bench")?;
        Ok(World::load(&dir)?)
    }

    fn train_config(&self, iterations: usize, lambda: f64) -> TrainConfig {
        let o = &self.cfg.optim;
        let l = &self.cfg.loss;
        TrainConfig {
            optim: OptimConfig {
                lr: o.lr,
                momentum: o.momentum,
                weight_decay: o.weight_decay,
                poly_power: o.poly_power,
                iterations,
                batch_size: o.batch_size,
            },
            seed: self.cfg.seeds.train,
            lambda,
            ema: l.ema,
            sce: SceWeights {
                alpha: l.alpha,
                beta: l.beta,
            },
            augment: self.cfg.augment,
            reduction: l.reduction,
        }
    }

    fn outputs(&self, model: &ToyModel, maps: &[latent_selftrain::synthbench::WorldMap]) -> CliResult<Outputs> {
        let mut probs = Vec::with_capacity(maps.len());
        let mut features = Vec::with_capacity(maps.len());
        for m in maps {
            let (p, latent) = model.predict(&m.features)?;
            probs.push(p);
            features.push(match self.cfg.features.space {
                FeatureSpace::Latent => latent,
                FeatureSpace::Input => m.features.clone(),
            });
        }
        Ok(Outputs { probs, features })
    }

    fn context(&self) -> CliResult<Context> {
        let world = self.world()?;
        let warmup: ToyModel = self.load(WARMUP_MODEL, "warmup")?;
        let source = self.outputs(&warmup, &world.source)?;
        let target = self.outputs(&warmup, &world.target)?;
        Ok(Context {
            world,
            warmup,
            source,
            target,
        })
    }

    fn evaluate_model(&self, model: &ToyModel, world: &World) -> CliResult<EvalReport> {
        let preds = world
            .target
            .iter()
            .map(|m| Ok(model.predict(&m.features)?.0.argmax_map()))
            .collect::<CliResult<Vec<LabelMap>>>()?;
        Ok(evaluate_all(
            preds.iter().zip(world.target.iter().map(|m| &m.labels)),
            world.num_classes(),
        )?)
    }

    // ---- artifact-producing commands ----

    pub fn gen_bench(&self) -> CliResult<World> {
        let spec = self.world_spec()?;
        let world = generate_world(&spec)?;
        let dir = self.cfg.world_dir();
        world.save(&dir)?;
        let mut csv = String::from("split,maps,pixels,classes,hard_pixels\n");
        for (name, maps) in [("source", &world.source), ("target", &world.target)] {
            let pixels: usize = maps.iter().map(|m| m.labels.num_pixels()).sum();
            let hard: usize = maps.iter().map(|m| m.hard.iter().filter(|&&h| h).count()).sum();
            let _ = writeln!(csv, "{name},{},{pixels},{},{hard}", maps.len(), world.num_classes());
        }
        self.write("gen_bench.csv", &csv)?;
        info!("world written to {}", dir.display());
        Ok(world)
    }

    pub fn warmup(&self) -> CliResult<EvalReport> {
        let world = self.world()?;
        let init = ToyModel::init(
            world.spec.dim,
            self.cfg.model.hidden,
            world.num_classes(),
            self.cfg.seeds.train,
        )?;
        let source: Vec<(FeatureMap, LabelMap)> = world
            .source
            .iter()
            .map(|m| (m.features.clone(), m.labels.clone()))
            .collect();
        let cfg = self.train_config(self.cfg.optim.warmup_iterations, 0.0);
        let (model, log) = toyseg::train_warmup(&init, &source, &cfg)?;
        self.save(&model, WARMUP_MODEL)?;
        self.write("warmup_log.csv", &step_log_csv(&log))?;
        let report = self.evaluate_model(&model, &world)?;
        self.write("eval_warmup.csv", &report.to_csv())?;
        info!("warmup target mIoU {:.4}", report.miou);
        Ok(report)
    }

    fn maps_for(&self, ctx: &Context, k: usize) -> CliResult<(MapsModel, Vec<usize>)> {
        let g = &self.cfg.gmm;
        let cfg = MapsBuildConfig {
            em: EmConfig {
                var_floor: g.var_floor,
                tol: g.tol,
                max_iter: g.max_iter,
                cap: g.cap,
            },
            min_samples: g.min_samples,
        };
        let build = build_maps(&ctx.source_samples(), ctx.classes(), k, self.cfg.seeds.em, &cfg)?;
        Ok((build.model, build.collected))
    }

    pub fn fit_maps(&self) -> CliResult<MapsModel> {
        let ctx = self.context()?;
        let (model, collected) = self.maps_for(&ctx, self.cfg.gmm.k)?;
        let centroids = CentroidModel::from_batches(&ctx.source_samples(), ctx.classes())?;
        self.save(&model, MAPS_MODEL)?;
        self.save(&centroids, CENTROID_MODEL)?;
        let mut csv = String::from("class,k,trusted_features,fitted\n");
        for (c, n) in collected.iter().enumerate() {
            let fitted = model.get(c).map(|g| g.k()).unwrap_or(0);
            let _ = writeln!(csv, "{c},{},{n},{}", self.cfg.gmm.k, fitted > 0);
        }
        self.write("fit_maps.csv", &csv)?;
        Ok(model)
    }

    fn assign(&self, ctx: &Context, model: &MapsModel, delta: f64) -> CliResult<Vec<PseudoLabelMap>> {
        ctx.target
            .features
            .iter()
            .map(|f| Ok(assign_maps_pla(model, f, delta)?))
            .collect()
    }

    fn pl_summary(pls: &[PseudoLabelMap], world: &World) -> CliResult<(f64, Option<f64>)> {
        let mut labeled = 0usize;
        let mut total = 0usize;
        let mut correct = 0usize;
        let mut compared = 0usize;
        for (pl, m) in pls.iter().zip(&world.target) {
            let l = pl.labels();
            labeled += l.labels().iter().filter(|&&v| v >= 0).count();
            total += l.num_pixels();
            let (c, n) = pla::pl_agreement(l, &m.labels)?;
            correct += c;
            compared += n;
        }
        let ratio = if total == 0 { 0.0 } else { labeled as f64 / total as f64 };
        let acc = (compared > 0).then(|| correct as f64 / compared as f64);
        Ok((ratio, acc))
    }

    pub fn assign_pl(&self) -> CliResult<(f64, Option<f64>)> {
        let ctx = self.context()?;
        let model: MapsModel = self.load(MAPS_MODEL, "fit-maps")?;
        let pls = self.assign(&ctx, &model, self.cfg.gmm.delta)?;
        fs::create_dir_all(self.out(PL_DIR))?;
        let mut csv = String::from("map,pl_ratio,pl_accuracy\n");
        for (i, (pl, m)) in pls.iter().zip(&ctx.world.target).enumerate() {
            pl.save(self.out(&format!("{PL_DIR}/target_{i:03}.lmap")))?;
            let acc = pla::pl_accuracy(pl.labels(), &m.labels)?;
            let _ = writeln!(csv, "{i},{},{}", f(pla::pl_ratio(pl)), opt(acc));
        }
        let (ratio, acc) = Self::pl_summary(&pls, &ctx.world)?;
        let _ = writeln!(csv, "all,{},{}", f(ratio), opt(acc));
        self.write("assign_pl.csv", &csv)?;
        info!("pseudo labels: ratio {ratio:.4}, accuracy {acc:?}");
        Ok((ratio, acc))
    }

    fn load_pls(&self, ctx: &Context) -> CliResult<Vec<PseudoLabelMap>> {
        (0..ctx.world.target.len())
            .map(|i| {
                let path = self.out(&format!("{PL_DIR}/target_{i:03}.lmap"));
                self.require(&path, "assign-pl")?;
                Ok(PseudoLabelMap::new(LabelMap::load(&path)?, self.cfg.gmm.delta, ctx.classes())?)
            })
            .collect()
    }

    fn protos_for(&self, ctx: &Context) -> CliResult<PrototypeSet> {
        let mut set = FeatureSet::new(ctx.target.features[0].dim());
        for f in &ctx.target.features {
            set.extend(&FeatureSet::from_map(f))?;
        }
        let cfg = KMeansConfig {
            max_iter: self.cfg.kmeans.max_iter,
            tol: self.cfg.kmeans.tol,
        };
        let j = self.cfg.kmeans.j.min(set.len());
        Ok(kmeans(&set, j, self.cfg.seeds.kmeans, &cfg)?.prototypes)
    }

    pub fn fit_target_protos(&self) -> CliResult<PrototypeSet> {
        let ctx = self.context()?;
        let protos = self.protos_for(&ctx)?;
        self.save(&protos, TARGET_PROTOS)?;
        let mut csv = String::from("prototypes,dim\n");
        let _ = writeln!(csv, "{},{}", protos.len(), protos.dim());
        self.write("fit_target_protos.csv", &csv)?;
        Ok(protos)
    }

    fn stm_for(
        &self,
        ctx: &Context,
        protos: &PrototypeSet,
        pls: &[PseudoLabelMap],
    ) -> CliResult<(Vec<TransferabilityMap>, EntropyStats, MeanDistance)> {
        let labels: Vec<LabelMap> = pls.iter().map(|p| p.labels().clone()).collect();
        let stats = stm::class_entropy(&ctx.target.probs, &labels, ctx.classes())?;
        let dmaps = ctx
            .source
            .features
            .iter()
            .map(|f| Ok(stm::distance_map(f, protos)?))
            .collect::<CliResult<Vec<_>>>()?;
        let gts: Vec<LabelMap> = ctx.world.source.iter().map(|m| m.labels.clone()).collect();
        let d_mean = stm::mean_distance(&dmaps, Some(&gts))?;
        let maps = dmaps
            .iter()
            .zip(&gts)
            .map(|(d, gt)| Ok(stm::transferability_map(d, gt, &stats, d_mean.value)?))
            .collect::<CliResult<Vec<_>>>()?;
        Ok((maps, stats, d_mean))
    }

    pub fn compute_stm(&self) -> CliResult<Vec<TransferabilityMap>> {
        let ctx = self.context()?;
        let protos: PrototypeSet = self.load(TARGET_PROTOS, "fit-target-protos")?;
        let pls = self.load_pls(&ctx)?;
        let (maps, stats, d_mean) = self.stm_for(&ctx, &protos, &pls)?;
        fs::create_dir_all(self.out(STM_DIR))?;
        let mut csv = String::from("map,mean_weight,hard_mean_weight,normal_mean_weight\n");
        for (i, (w, m)) in maps.iter().zip(&ctx.world.source).enumerate() {
            w.save(self.out(&format!("{STM_DIR}/source_{i:03}.wmap")))?;
            let (hard, normal) = split_means(w, &m.labels, &m.hard);
            let all = mean(w.weights.iter().zip(m.labels.labels()).filter(|(_, &l)| l >= 0).map(|(w, _)| *w));
            let _ = writeln!(csv, "{i},{},{},{}", opt(all), opt(hard), opt(normal));
        }
        self.write("compute_stm.csv", &csv)?;
        self.write(
            "stm_summary.csv",
            &format!("mean_distance,degenerate\n{},{}\n", f(d_mean.value), d_mean.degenerate),
        )?;
        self.write("entropy.csv", &stats.to_csv())?;
        Ok(maps)
    }

    fn load_stms(&self, ctx: &Context) -> CliResult<Vec<TransferabilityMap>> {
        if !self.cfg.stm.enabled {
            return Ok(ctx.world.source.iter().map(|m| TransferabilityMap::uniform(&m.labels)).collect());
        }
        (0..ctx.world.source.len())
            .map(|i| {
                let path = self.out(&format!("{STM_DIR}/source_{i:03}.wmap"));
                self.require(&path, "compute-stm")?;
                Ok(TransferabilityMap::load(&path)?)
            })
            .collect()
    }

    fn retrain(&self, ctx: &Context, stms: &[TransferabilityMap], pls: &[PseudoLabelMap]) -> CliResult<(ToyModel, String)> {
        let source: Vec<SourceItem> = ctx
            .world
            .source
            .iter()
            .zip(stms)
            .map(|(m, w)| SourceItem {
                features: &m.features,
                labels: &m.labels,
                weights: w,
            })
            .collect();
        let target: Vec<TargetItem> = ctx
            .world
            .target
            .iter()
            .zip(pls)
            .map(|(m, pl)| TargetItem {
                features: &m.features,
                pseudo: pl,
            })
            .collect();
        let cfg = self.train_config(self.cfg.optim.self_iterations, self.cfg.loss.lambda);
        let out = toyseg::train_self(&ctx.warmup, &source, &target, &cfg)?;
        Ok((out.student, step_log_csv(&out.log)))
    }

    pub fn self_train(&self) -> CliResult<EvalReport> {
        let ctx = self.context()?;
        let pls = self.load_pls(&ctx)?;
        let stms = self.load_stms(&ctx)?;
        let (model, log) = self.retrain(&ctx, &stms, &pls)?;
        self.save(&model, SELFTRAIN_MODEL)?;
        self.write("selftrain_log.csv", &log)?;
        let report = self.evaluate_model(&model, &ctx.world)?;
        self.write("eval_selftrain.csv", &report.to_csv())?;
        info!("self-trained target mIoU {:.4}", report.miou);
        Ok(report)
    }

    /// Evaluates a stored model (`warmup`, `selftrain`, or a path) on the target
    /// ground truth. `None` scores the ground truth against itself.
    pub fn evaluate(&self, which: Option<&str>) -> CliResult<EvalReport> {
        let world = self.world()?;
        let (name, report) = match which {
            None => {
                let truths: Vec<&LabelMap> = world.target.iter().map(|m| &m.labels).collect();
                ("truth".to_string(), evaluate_all(truths.iter().copied().zip(truths.iter().copied()), world.num_classes())?)
            }
            Some(w) => {
                let (name, model): (String, ToyModel) = match w {
                    "warmup" => ("warmup".into(), self.load(WARMUP_MODEL, "warmup")?),
                    "selftrain" => ("selftrain".into(), self.load(SELFTRAIN_MODEL, "self-train")?),
                    path => {
                        let p = Path::new(path);
                        self.require(p, "warmup")?;
                        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
                        (stem, load_model(p)?)
                    }
                };
                let r = self.evaluate_model(&model, &world)?;
                (name, r)
            }
        };
        self.write(&format!("eval_{name}.csv"), &report.to_csv())?;
        Ok(report)
    }

    pub fn run_all(&self) -> CliResult<(EvalReport, EvalReport)> {
        self.gen_bench()?;
        let warm = self.warmup()?;
        self.fit_maps()?;
        self.assign_pl()?;
        self.fit_target_protos()?;
        self.compute_stm()?;
        let tuned = self.self_train()?;
        let mut csv = String::from("stage,miou,accuracy\n");
        let _ = writeln!(csv, "warmup,{},{}", f(warm.miou), f(warm.accuracy));
        let _ = writeln!(csv, "selftrain,{},{}", f(tuned.miou), f(tuned.accuracy));
        self.write("run_all.csv", &csv)?;
        Ok((warm, tuned))
    }

    // ---- studies ----

    fn chain(&self, ctx: &Context, maps: &MapsModel, protos: &PrototypeSet, delta: f64) -> CliResult<ChainResult> {
        let pls = self.assign(ctx, maps, delta)?;
        let (pl_ratio, pl_accuracy) = Self::pl_summary(&pls, &ctx.world)?;
        let stms = if self.cfg.stm.enabled {
            self.stm_for(ctx, protos, &pls)?.0
        } else {
            ctx.world.source.iter().map(|m| TransferabilityMap::uniform(&m.labels)).collect()
        };
        let (model, _) = self.retrain(ctx, &stms, &pls)?;
        let report = self.evaluate_model(&model, &ctx.world)?;
        Ok(ChainResult {
            pl_ratio,
            pl_accuracy,
            report,
        })
    }

    fn protos_or_fit(&self, ctx: &Context) -> CliResult<PrototypeSet> {
        let path = self.out(TARGET_PROTOS);
        if path.exists() {
            Ok(load_model(&path)?)
        } else {
            self.protos_for(ctx)
        }
    }

    pub fn sweep_delta(&self, deltas: &[f64]) -> CliResult<Vec<ChainResult>> {
        let ctx = self.context()?;
        let maps: MapsModel = self.load(MAPS_MODEL, "fit-maps")?;
        let protos = self.protos_or_fit(&ctx)?;
        let mut csv = String::from("delta,pl_ratio,pl_accuracy,miou\n");
        let mut rows = Vec::with_capacity(deltas.len());
        for &d in deltas {
            let r = self.chain(&ctx, &maps, &protos, d)?;
            let _ = writeln!(csv, "{},{},{},{}", f(d), f(r.pl_ratio), opt(r.pl_accuracy), f(r.report.miou));
            rows.push(r);
        }
        self.write("sweep_delta.csv", &csv)?;
        Ok(rows)
    }

    pub fn sweep_k(&self, ks: &[usize]) -> CliResult<Vec<ChainResult>> {
        let ctx = self.context()?;
        let protos = self.protos_or_fit(&ctx)?;
        let mut csv = String::from("k,pl_ratio,pl_accuracy,miou\n");
        let mut rows = Vec::with_capacity(ks.len());
        for &k in ks {
            let (maps, _) = self.maps_for(&ctx, k)?;
            let r = self.chain(&ctx, &maps, &protos, self.cfg.gmm.delta)?;
            let _ = writeln!(csv, "{k},{},{},{}", f(r.pl_ratio), opt(r.pl_accuracy), f(r.report.miou));
            rows.push(r);
        }
        self.write("sweep_k.csv", &csv)?;
        Ok(rows)
    }

    pub fn bench_pla(&self) -> CliResult<Vec<BenchRow>> {
        let ctx = self.context()?;
        let maps: MapsModel = self.load(MAPS_MODEL, "fit-maps")?;
        let centroids: CentroidModel = self.load(CENTROID_MODEL, "fit-maps")?;
        let b = &self.cfg.bench;
        let mut rows = Vec::new();
        let score = |strategy: &'static str, threshold: f64, pls: Vec<PseudoLabelMap>| -> CliResult<BenchRow> {
            let (pl_ratio, pl_accuracy) = Self::pl_summary(&pls, &ctx.world)?;
            Ok(BenchRow {
                strategy,
                threshold,
                pl_ratio,
                pl_accuracy,
            })
        };
        let cas = |t: f64| -> CliResult<Vec<PseudoLabelMap>> {
            ctx.target.features.iter().map(|f| Ok(assign_cas_pla(&centroids, f, t)?)).collect()
        };
        let conf = |t: f64| -> CliResult<Vec<PseudoLabelMap>> {
            ctx.target.probs.iter().map(|p| Ok(assign_conf_pla(p, t)?)).collect()
        };
        let mut matched = Vec::new();
        for &d in &b.maps_deltas {
            let row = score("maps", d, self.assign(&ctx, &maps, d)?)?;
            matched.push(row.pl_ratio);
            rows.push(row);
        }
        for &t in &b.cas_thresholds {
            rows.push(score("cas", t, cas(t)?)?);
        }
        for &t in &b.conf_thresholds {
            rows.push(score("conf", t, conf(t)?)?);
        }
        if b.match_ratio {
            let dists: Vec<f64> = ctx
                .target
                .features
                .iter()
                .flat_map(|fm| (0..fm.num_pixels()).map(move |i| fm.pixel_f64(i)))
                .filter_map(|x| centroids.nearest(&x).map(|(_, d)| d))
                .collect();
            let confs: Vec<f64> = ctx
                .target
                .probs
                .iter()
                .flat_map(|p| (0..p.num_pixels()).map(move |i| p.pixel(i)[p.argmax(i)]))
                .collect();
            for ratio in matched {
                if let Some(t) = quantile_threshold(&dists, ratio, false) {
                    rows.push(score("cas_matched", t, cas(t)?)?);
                }
                if let Some(t) = quantile_threshold(&confs, ratio, true) {
                    if t > 0.0 && t <= 1.0 {
                        rows.push(score("conf_matched", t, conf(t)?)?);
                    }
                }
            }
        }
        let mut csv = String::from("strategy,threshold,pl_ratio,pl_accuracy\n");
        for r in &rows {
            let _ = writeln!(csv, "{},{},{},{}", r.strategy, f(r.threshold), f(r.pl_ratio), opt(r.pl_accuracy));
        }
        self.write("bench_pla.csv", &csv)?;
        Ok(rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub strategy: &'static str,
    pub threshold: f64,
    pub pl_ratio: f64,
    pub pl_accuracy: Option<f64>,
}

/// Threshold admitting a `ratio` share of `scores`: the largest kept value when
/// small scores are kept, the smallest when large scores are kept.
fn quantile_threshold(scores: &[f64], ratio: f64, keep_high: bool) -> Option<f64> {
    let n = scores.len();
    let keep = (ratio * n as f64).round() as usize;
    if keep == 0 || n == 0 {
        return None;
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    Some(if keep_high { s[n - keep] } else { s[keep - 1] })
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Mean weight over hard and over normal labeled pixels.
pub fn split_means(w: &TransferabilityMap, labels: &LabelMap, hard: &[bool]) -> (Option<f64>, Option<f64>) {
    let pick = |want: bool| {
        mean(
            w.weights
                .iter()
                .zip(labels.labels())
                .zip(hard)
                .filter(|((_, &l), &h)| l >= 0 && h == want)
                .map(|((w, _), _)| *w),
        )
    };
    (pick(true), pick(false))
}
