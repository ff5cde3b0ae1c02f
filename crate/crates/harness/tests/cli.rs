use std::path::Path;
use std::process::{Command, Output};

use cdp_harness::cli::PlanRecord;
use cdp_harness::config::{names, ExperimentConfig, MethodSpec, Planner, RefineMode};
use cdp_harness::experiment::Metrics;

fn cdp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdp"))
        .args(args)
        .args(["--out", dir.to_str().unwrap()])
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// A few scenes and a handful of optimizer steps per level.
fn tiny_config(dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig { seed: Some(7), out_dir: dir.to_path_buf(), train_scenes: 6, test_scenes: 3, ..ExperimentConfig::default() };
    for t in [&mut c.high_training, &mut c.low_training, &mut c.flat_training] {
        t.steps = 2;
        t.batch_size = 4;
        t.warmup_steps = 1;
    }
    c.curve_steps = vec![2];
    c.curve_scenes = 2;
    c.timing_repeats = 1;
    c.checkpoint_every = 1;
    c.methods = vec![
        MethodSpec::new(names::EXPERT, Planner::Expert),
        MethodSpec::new(names::STRAIGHT, Planner::StraightLine),
        MethodSpec::new(names::CASCADE, Planner::Cascade),
        MethodSpec::new(names::REFINE, Planner::Cascade).refined(RefineMode::Low, cdp_harness::config::DetectorKind::Exact),
    ];
    c
}

fn read_plans(path: &Path) -> Vec<PlanRecord> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn unknown_flag_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = cdp(dir.path(), &["eval", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let out = Command::new(env!("CARGO_BIN_EXE_cdp")).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["gen-data", "train-high", "train-low", "train-flat", "train-collision", "plan", "repair", "eval", "report"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn eval_without_checkpoints_names_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path()).save(&dir.path().join("config.json")).unwrap();
    ok(&cdp(dir.path(), &["gen-data"]));
    let out = cdp(dir.path(), &["eval"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("high.ckpt") && err.contains("train-high"), "{err}");
}

#[test]
fn invalid_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config(dir.path());
    c.methods.push(MethodSpec::new("bad", Planner::Flat).refined(RefineMode::Low, cdp_harness::config::DetectorKind::Exact));
    let path = dir.path().join("bad.json");
    std::fs::write(&path, serde_json::to_string(&c).unwrap()).unwrap();
    let out = cdp(dir.path(), &["gen-data", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn staged_pipeline_and_repair_equivalence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_config(d).save(&d.join("config.json")).unwrap();
    for stage in ["gen-data", "train-high", "train-low"] {
        ok(&cdp(d, &[stage]));
    }
    assert!(d.join("checkpoints/high.ckpt").exists() && d.join("checkpoints/low.ckpt").exists());
    assert!(!d.join("checkpoints/high.partial.ckpt").exists());
    let log = std::fs::read_to_string(d.join("logs/train_high.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let raw = d.join("raw.jsonl");
    ok(&cdp(d, &["plan", "--refine", "off", "--output", raw.to_str().unwrap()]));
    ok(&cdp(d, &["repair", "--input", raw.to_str().unwrap()]));
    let direct = d.join("direct.jsonl");
    ok(&cdp(d, &["plan", "--refine", "low", "--output", direct.to_str().unwrap()]));
    let (repaired, direct) = (read_plans(&d.join("raw.repaired.jsonl")), read_plans(&direct));
    assert_eq!(repaired.len(), 3);
    for (a, b) in repaired.iter().zip(&direct) {
        assert_eq!(a.spec, b.spec);
        assert_eq!(a.result.trajectory, b.result.trajectory);
        assert_eq!(a.result.success, b.result.success);
        assert_eq!(a.result.repair, b.result.repair);
    }
    // Refined plans are not refined again.
    assert_eq!(cdp(d, &["repair", "--input", d.join("direct.jsonl").to_str().unwrap()]).status.code(), Some(1));

    ok(&cdp(d, &["eval"]));
    let first = std::fs::read(d.join("metrics.json")).unwrap();
    ok(&cdp(d, &["eval"]));
    assert_eq!(std::fs::read(d.join("metrics.json")).unwrap(), first, "metrics.json is not reproducible");
    let m: Metrics = serde_json::from_slice(&first).unwrap();
    let rate = |n: &str| m.methods.iter().find(|x| x.method == n).unwrap().success_rate;
    assert_eq!(rate(names::EXPERT), 1.0);
    assert!(rate(names::STRAIGHT) <= rate(names::EXPERT));

    ok(&cdp(d, &["report"]));
    let table = std::fs::read_to_string(d.join("table.csv")).unwrap();
    assert_eq!(table.lines().next(), Some(cdp_harness::report::TABLE_HEADER));
    assert_eq!(table.lines().count(), 1 + 4);
    for f in cdp_harness::report::PLOT_FILES {
        assert!(d.join("plots").join(f).exists(), "{f}");
    }
}

#[test]
fn seed_is_recorded_and_reused() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut c = tiny_config(d);
    c.seed = None;
    c.save(&d.join("config.json")).unwrap();
    let out = cdp(d, &["gen-data"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("drawn from entropy"));
    let recorded = ExperimentConfig::load(&d.join("config.json")).unwrap().seed.expect("seed written back");
    let out = cdp(d, &["gen-data"]);
    ok(&out);
    assert!(!String::from_utf8_lossy(&out.stderr).contains("drawn from entropy"));
    assert_eq!(ExperimentConfig::load(&d.join("config.json")).unwrap().seed, Some(recorded));
}
