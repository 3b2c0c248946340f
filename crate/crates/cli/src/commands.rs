use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::{PipelineConfig, Seeds};
use crate::error::CliResult;
use crate::pipeline::Pipeline;

#[derive(Debug, Parser)]
#[command(name = "selftrain", version, about = "Prototype pseudo-labeling and transferability-weighted self-training")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed; sets the world, EM, k-means and training seeds to n, n+1, n+2, n+3.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides paths.out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Config override as section.key=value; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic world.
    GenBench,
    /// Train the segmentor on labeled source maps.
    Warmup,
    /// Fit per-class Gaussian mixtures (and centroids) on trusted source features.
    FitMaps,
    /// Assign target pseudo labels by mixture density.
    AssignPl,
    /// Cluster target features into prototypes.
    FitTargetProtos,
    /// Compute source transferability maps.
    ComputeStm,
    /// Retrain on weighted source and pseudo-labeled target maps.
    SelfTrain,
    /// Evaluate a model on the target ground truth.
    Evaluate {
        /// `warmup`, `selftrain`, or a model file path.
        #[arg(long, default_value = "selftrain", conflicts_with = "truth")]
        model: String,
        /// Score the ground truth against itself.
        #[arg(long)]
        truth: bool,
    },
    /// Run the full pipeline from world generation to evaluation.
    RunAll,
    /// Pseudo-label ratio, accuracy and retrained mIoU per density threshold.
    SweepDelta {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        deltas: Option<Vec<f64>>,
    },
    /// Retrained mIoU per mixture size.
    SweepK {
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
    },
    /// Compare mixture, centroid and confidence pseudo-label assigners.
    BenchPla,
}

impl Cli {
    pub fn config(&self) -> CliResult<PipelineConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(out) = &self.out {
            overrides.push(format!("paths.out={:?}", out.display().to_string()));
        }
        let mut cfg = PipelineConfig::load(self.config.as_deref(), &overrides)?;
        if let Some(s) = self.seed {
            cfg.seeds = Seeds::from_base(s);
        }
        Ok(cfg)
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Executes the parsed command and returns the text to print.
pub fn run(cli: &Cli) -> CliResult<String> {
    let cfg = cli.config()?;
    let p = Pipeline::new(cfg);
    let mut s = String::new();
    match &cli.command {
        Command::GenBench => {
            let w = p.gen_bench()?;
            let _ = writeln!(s, "world: {} source, {} target maps", w.source.len(), w.target.len());
        }
        Command::Warmup => {
            let r = p.warmup()?;
            let _ = writeln!(s, "warmup target mIoU {}", pct(r.miou));
        }
        Command::FitMaps => {
            let m = p.fit_maps()?;
            let _ = writeln!(s, "fitted mixtures for classes {:?}", m.present_classes());
        }
        Command::AssignPl => {
            let (ratio, acc) = p.assign_pl()?;
            let acc = acc.map(pct).unwrap_or_else(|| "n/a".into());
            let _ = writeln!(s, "pl_ratio {} pl_accuracy {acc}", pct(ratio));
        }
        Command::FitTargetProtos => {
            let pr = p.fit_target_protos()?;
            let _ = writeln!(s, "{} target prototypes", pr.len());
        }
        Command::ComputeStm => {
            let maps = p.compute_stm()?;
            let _ = writeln!(s, "{} transferability maps", maps.len());
        }
        Command::SelfTrain => {
            let r = p.self_train()?;
            let _ = writeln!(s, "self-trained target mIoU {}", pct(r.miou));
        }
        Command::Evaluate { model, truth } => {
            let r = p.evaluate((!truth).then_some(model.as_str()))?;
            s.push_str(&r.pretty());
        }
        Command::RunAll => {
            let (w, t) = p.run_all()?;
            let _ = writeln!(s, "warmup mIoU {} -> self-trained mIoU {}", pct(w.miou), pct(t.miou));
        }
        Command::SweepDelta { deltas } => {
            let deltas = deltas.clone().unwrap_or_else(|| p.cfg.bench.sweep_deltas.clone());
            let rows = p.sweep_delta(&deltas)?;
            let _ = writeln!(s, "delta  pl_ratio  mIoU");
            for (d, r) in deltas.iter().zip(rows) {
                let _ = writeln!(s, "{d:>6}  {:>8}  {}", pct(r.pl_ratio), pct(r.report.miou));
            }
        }
        Command::SweepK { ks } => {
            let ks = ks.clone().unwrap_or_else(|| p.cfg.bench.sweep_ks.clone());
            let rows = p.sweep_k(&ks)?;
            let _ = writeln!(s, "K  mIoU");
            for (k, r) in ks.iter().zip(rows) {
                let _ = writeln!(s, "{k:<2} {}", pct(r.report.miou));
            }
        }
        Command::BenchPla => {
            for r in p.bench_pla()? {
                let acc = r.pl_accuracy.map(pct).unwrap_or_else(|| "n/a".into());
                let _ = writeln!(s, "{:<13} {:>10.4} ratio {:>6} acc {acc}", r.strategy, r.threshold, pct(r.pl_ratio));
            }
        }
    }
    Ok(s)
}
