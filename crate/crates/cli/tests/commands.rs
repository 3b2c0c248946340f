use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set", "world.height=12",
    "--set", "world.width=12",
    "--set", "world.source_maps=6",
    "--set", "world.target_maps=4",
    "--set", "optim.warmup_iterations=80",
    "--set", "optim.self_iterations=40",
];

fn selftrain(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selftrain"))
        .arg("--out")
        .arg(out)
        .args(["--seed", "3"])
        .args(SMALL)
        .args(args)
        .output()
        .expect("spawn selftrain")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = selftrain(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn csv_rows(path: PathBuf) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn missing_prerequisites_name_their_producer() {
    let dir = tempfile::tempdir().unwrap();
    let o = selftrain(dir.path(), &["warmup"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gen-bench"));

    ok(dir.path(), &["gen-bench"]);
    ok(dir.path(), &["warmup"]);
    let o = selftrain(dir.path(), &["assign-pl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("selftrain fit-maps"));
}

#[test]
fn invalid_configuration_lists_every_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = selftrain(dir.path(), &["--set", "gmm.k=0", "--set", "loss.ema=3", "gen-bench"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("gmm.k") && err.contains("loss.ema"), "{err}");
}

#[test]
fn diverging_training_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-bench"]);
    let o = selftrain(dir.path(), &["--set", "optim.lr=1e200", "--set", "optim.weight_decay=0.5", "warmup"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn truth_scored_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-bench"]);
    let text = ok(dir.path(), &["evaluate", "--truth"]);
    assert!(text.lines().any(|l| l.split_whitespace().eq(["mIoU", "100.00"])), "{text}");
}

#[test]
fn run_all_matches_the_manual_chain() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let p = ["--set", "world.preset=\"figure1a\""];
    ok(a.path(), &[&p[..], &["run-all"]].concat());
    for cmd in ["gen-bench", "warmup", "fit-maps", "assign-pl", "fit-target-protos", "compute-stm", "self-train"] {
        ok(b.path(), &[&p[..], &[cmd]].concat());
    }
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    for name in ["warmup.model", "maps.model", "target_protos.model", "selftrain.model", "eval_selftrain.csv"] {
        assert!(ta.contains_key(Path::new(name)), "run-all did not write {name}");
    }
    assert!(ta.keys().any(|k| k.starts_with("pl")) && ta.keys().any(|k| k.starts_with("stm")));
    for (k, v) in &tb {
        assert_eq!(ta.get(k), Some(v), "{} differs", k.display());
    }
}

#[test]
fn duplicate_sweep_entries_give_identical_rows() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["gen-bench", "warmup", "fit-maps"] {
        ok(dir.path(), &[cmd]);
    }
    ok(dir.path(), &["sweep-delta", "--deltas", "-2.5,-2.5,3"]);
    let rows = csv_rows(dir.path().join("sweep_delta.csv"));
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0], rows[1]);
    assert!(rows[2][1].parse::<f64>().unwrap() <= rows[0][1].parse::<f64>().unwrap());

    ok(dir.path(), &["sweep-k", "--ks", "2,2"]);
    let rows = csv_rows(dir.path().join("sweep_k.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], rows[1]);
}

#[test]
fn single_component_sweep_runs_on_a_single_cluster_world() {
    let dir = tempfile::tempdir().unwrap();
    let p = ["--set", "world.preset=\"anisotropic\""];
    for cmd in ["gen-bench", "warmup", "fit-maps"] {
        ok(dir.path(), &[&p[..], &[cmd]].concat());
    }
    let text = ok(dir.path(), &[&p[..], &["sweep-k", "--ks", "1"]].concat());
    assert_eq!(csv_rows(dir.path().join("sweep_k.csv")).len(), 1, "{text}");
}

#[test]
fn threshold_extremes_label_everything_or_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let p = [
        "--set", "bench.cas_thresholds=[inf]",
        "--set", "bench.conf_thresholds=[1.0]",
        "--set", "bench.match_ratio=false",
    ];
    for cmd in ["gen-bench", "warmup", "fit-maps", "bench-pla"] {
        ok(dir.path(), &[&p[..], &[cmd]].concat());
    }
    let rows = csv_rows(dir.path().join("bench_pla.csv"));
    let ratio = |strategy: &str| -> f64 {
        rows.iter().find(|r| r[0] == strategy).unwrap()[2].parse().unwrap()
    };
    assert_eq!(ratio("cas"), 1.0);
    assert_eq!(ratio("conf"), 0.0);
}

#[test]
fn a_config_file_and_overrides_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[world]\npreset = \"figure1a\"\n\n[gmm]\nk = 3\n").unwrap();
    let out = dir.path().join("out");
    let cfg_arg = cfg.to_str().unwrap();
    for cmd in ["gen-bench", "warmup", "fit-maps"] {
        ok(&out, &["--config", cfg_arg, "--set", "gmm.k=2", cmd]);
    }
    let maps = fs::read_to_string(out.join("maps.model")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&maps).unwrap();
    let text = v.to_string();
    // figure1a has two classes; K=2 from the override wins over the file's 3.
    assert_eq!(text.matches("\"weight\"").count(), 4, "{text}");
}

#[test]
fn shipped_config_matches_the_built_in_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    let cfg = selftrain_cli::config::PipelineConfig::load(Some(&path), &[]).unwrap();
    assert_eq!(cfg, selftrain_cli::config::PipelineConfig::default());
}
