use std::fs;
use std::path::Path;
use std::process::Command as Proc;

use hypervae_cli::config::{Family, Precision};
use hypervae_cli::{replay, run_command, Command, ExperimentConfig, Manifest, MANIFEST_FILE};

fn bin() -> Proc {
    Proc::new(env!("CARGO_BIN_EXE_hypervae"))
}

/// A config small enough to run every pipeline in a second or two.
fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = 3;
    c.data.side = 6;
    c.data.classes = 3;
    c.data.samples_per_class = 30;
    c.data.test_fraction = 0.3;
    c.model.hidden = 8;
    c.model.latent = 2;
    c.model.hyper_enc_hidden = 8;
    c.model.hyper_latent = 2;
    c.model.hyper_dec_hidden = 16;
    c.train.max_iters = 40;
    c.train.hyper_max_iters = 40;
    c.train.batch_size = 5;
    c.train.early_stop_window = 0;
    c.eval.is_samples = 8;
    c.eval.score_samples = 2;
    c.eval.max_items = Some(6);
    c.outlier.contamination = 0.2;
    c.discovery.steps = 2;
    c.discovery.bo_iters = 14;
    c.discovery.candidates = 16;
    c.mdl.samples = 2;
    c
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn config_round_trips_through_toml() {
    let mut c = tiny();
    c.precision = Precision::F32;
    c.data.family = Family::Strokes;
    c.outlier.normal_classes = Some(vec![0, 2]);
    let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
    assert_eq!(back, c);
}

#[test]
fn empty_toml_gives_defaults() {
    assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
}

#[test]
fn unknown_keys_are_rejected() {
    assert!(ExperimentConfig::from_toml("seeed = 1").is_err());
    assert!(ExperimentConfig::from_toml("[train]\nlearning_rte = 0.1").is_err());
    assert!(ExperimentConfig::from_toml("[model]\nhyper_dec_hidden = 10").is_err());
    assert!(ExperimentConfig::from_toml("[data]\nsource = \"idx\"").is_err());
}

#[test]
fn every_command_writes_manifest_and_replays_identically() {
    let cfg = tiny();
    for cmd in Command::ALL {
        let tmp = tempfile::tempdir().unwrap();
        let a = tmp.path().join("a");
        let out = run_command(cmd, &cfg, &a).unwrap_or_else(|e| panic!("{}: {e:#}", cmd.name()));
        assert!(out.passed, "{}", cmd.name());
        let m = Manifest::load(&a.join(MANIFEST_FILE)).unwrap();
        assert!(m.complete);
        assert_eq!(m.command, cmd.name());
        assert!(m.csv_artifacts().count() > 0, "{} wrote no csv", cmd.name());
        assert_eq!(m.config().unwrap(), cfg);
        let mismatches = replay(&m, &tmp.path().join("b")).unwrap();
        assert!(mismatches.is_empty(), "{}: {mismatches:?}", cmd.name());
    }
}

#[test]
fn f32_pipeline_runs() {
    let mut cfg = tiny();
    cfg.precision = Precision::F32;
    let tmp = tempfile::tempdir().unwrap();
    run_command(Command::EvalDensity, &cfg, tmp.path()).unwrap();
    let csv = read(tmp.path(), "density.csv");
    assert_eq!(csv.lines().count(), 1 + 2 * 3 + 2);
    assert!(csv.lines().any(|l| l.starts_with("mean,hypervae,")));
}

#[test]
fn outputs_have_expected_shape() {
    let cfg = tiny();
    let tmp = tempfile::tempdir().unwrap();
    run_command(Command::Discover, &cfg, tmp.path()).unwrap();
    let trace = read(tmp.path(), "discovery_trace.csv");
    assert!(trace.starts_with("step,bo_iter,distance,best_distance,u_norm\n"));
    assert_eq!(trace.lines().count(), 1 + 2 * 14);
    let summary = read(tmp.path(), "discovery_summary.csv");
    assert_eq!(summary.lines().count(), 5);
    let pgm = fs::read(tmp.path().join("designs.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));

    run_command(Command::Outlier, &cfg, tmp.path()).unwrap();
    let rows = read(tmp.path(), "outlier.csv");
    // two models per normal class plus two mean rows
    assert_eq!(rows.lines().count(), 1 + 2 * 3 + 2);
}

#[test]
fn failed_run_leaves_incomplete_manifest() {
    let mut cfg = tiny();
    cfg.discovery.held_out_class = 9;
    let tmp = tempfile::tempdir().unwrap();
    assert!(run_command(Command::Discover, &cfg, tmp.path()).is_err());
    let m = Manifest::load(&tmp.path().join(MANIFEST_FILE)).unwrap();
    assert!(!m.complete);
    assert!(m.error.unwrap().contains("held-out class 9"));
}

#[test]
fn replay_detects_tampering() {
    let cfg = tiny();
    let tmp = tempfile::tempdir().unwrap();
    let out = run_command(Command::TrainVae, &cfg, tmp.path()).unwrap();
    let mut m = out.manifest;
    m.artifacts.iter_mut().find(|a| a.path.ends_with(".csv")).unwrap().sha256 = "00".repeat(32);
    let mismatches = replay(&m, &tmp.path().join("again")).unwrap();
    assert_eq!(mismatches.len(), 1);
}

#[test]
fn binary_rejects_unknown_subcommand() {
    let out = bin().arg("train-everything").output().unwrap();
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).to_lowercase().contains("usage"));
}

#[test]
fn binary_gradcheck_and_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("cfg.toml");
    fs::write(&cfg_path, tiny().to_toml().unwrap()).unwrap();
    let run = tmp.path().join("run");
    let out = bin().args(["gradcheck", "--config"]).arg(&cfg_path).arg("--out").arg(&run).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("dense_layer"));

    let out = bin().arg("replay").arg(run.join(MANIFEST_FILE)).arg("--out").arg(tmp.path().join("re")).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn binary_gradcheck_fails_on_impossible_tolerance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("cfg.toml");
    let mut cfg = tiny();
    cfg.gradcheck.tolerance = 1e-300;
    fs::write(&cfg_path, cfg.to_toml().unwrap()).unwrap();
    let out = bin().args(["gradcheck", "--config"]).arg(&cfg_path).arg("--out").arg(tmp.path().join("run")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn binary_reports_bad_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("cfg.toml");
    fs::write(&cfg_path, "[model]\nlatnt = 3\n").unwrap();
    let out = bin().args(["train-vae", "--config"]).arg(&cfg_path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("latnt"));
}
