use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[model]
d_model = 6
d_inter = 4
num_experts = 4
kappa = 2
num_layers = 1
vocab = 12
seq_len = 10

[corpus]
vocab = 12
num_sequences = 80
seq_len = 10
train_frac = 0.5
calib_frac = 0.25
test_frac = 0.25

[train]
steps = 15
batch_size = 8

[run]
ratios = [0.0, 0.25, 0.5]
seeds = [0, 1]
calib_batch_size = 5
compare_methods = ["heapr", "random", "camera"]
"#;

fn heapr(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("tiny.toml");
    if !cfg.exists() {
        fs::write(&cfg, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_heapr"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .env_remove("HEAPR_OUT")
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn help_lists_every_subcommand() {
    let o = Command::new(env!("CARGO_BIN_EXE_heapr")).arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["gen-corpus", "train", "calibrate", "score", "prune", "eval", "oracle", "sweep", "compare"] {
        assert!(text.contains(sub), "missing {sub} in\n{text}");
    }
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_heapr")).arg("--bogus").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(heapr(dir.path(), &["--set", "train.nope=1", "train"]).status.code(), Some(2));
    assert_eq!(heapr(dir.path(), &["--set", "run.method=camera", "prune"]).status.code(), Some(2));
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train\nsteps = 1").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_heapr"))
        .args(["--config", bad.to_str().unwrap(), "train"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("out");
    fs::write(&blocker, "not a directory").unwrap();
    assert_eq!(heapr(dir.path(), &["gen-corpus"]).status.code(), Some(1));
}

#[test]
fn full_pipeline_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["gen-corpus", "train", "calibrate", "score", "prune", "eval", "oracle"] {
        ok(&heapr(dir.path(), &[cmd]));
    }
    ok(&heapr(dir.path(), &["sweep", "--calib-sizes", "5,10"]));
    ok(&heapr(dir.path(), &["compare"]));
    let out = dir.path().join("out");
    for f in [
        "corpus.json",
        "model.json",
        "train_report.json",
        "covariances.json",
        "importance.csv",
        "prune_manifest.json",
        "pruned_model.json",
        "flops.json",
        "eval.json",
        "obs.csv",
        "oracle_summary.json",
        "sweep.csv",
        "calib_sizes.csv",
        "compare.csv",
        "run_manifest.json",
        "config.toml",
        "seed-1/compare.csv",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["tool_version"], env!("CARGO_PKG_VERSION"));
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(sweep.starts_with("ratio,method,mode,seed,perplexity,flops_saving,param_fraction\n"));
    assert_eq!(sweep.lines().count(), 4);
    let compare = fs::read_to_string(out.join("compare.csv")).unwrap();
    assert_eq!(compare.lines().count(), 1 + 2 * 3 * 3);
    let importance = fs::read_to_string(out.join("importance.csv")).unwrap();
    assert!(importance.starts_with("layer,expert,channel,score,token_count,method\n"));
    assert!(fs::read_to_string(out.join("flops.json")).unwrap().contains("multiply-add = 2 FLOPs"));
}

#[test]
fn deterministic_reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        ok(&heapr(d, &["prune"]));
        ok(&heapr(d, &["sweep"]));
    }
    for f in ["importance.csv", "sweep.csv", "prune_manifest.json", "model.json", "run_manifest.json"] {
        let x = fs::read(a.path().join("out").join(f)).unwrap();
        let y = fs::read(b.path().join("out").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
}

#[test]
fn output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let root = dir.path().join("env-out");
    let o = Command::new(env!("CARGO_BIN_EXE_heapr"))
        .args(["--config", cfg.to_str().unwrap(), "gen-corpus"])
        .env("HEAPR_OUT", &root)
        .output()
        .unwrap();
    ok(&o);
    assert!(root.join("corpus.json").exists());
}
