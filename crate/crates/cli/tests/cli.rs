use std::path::{Path, PathBuf};
use std::process::Command;

use pdmp_cli::config::ModelConfig;
use pdmp_cli::{parse_config, run_experiment, ExperimentConfig, ExperimentKind};
use pdmp_core::models::MorrisLecarParams;

fn shipped(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn load(name: &str) -> ExperimentConfig {
    parse_config(&std::fs::read_to_string(shipped(name)).unwrap()).unwrap()
}

fn small(mut cfg: ExperimentConfig, dir: &Path) -> ExperimentConfig {
    cfg.replicas = 200;
    cfg.bounds.moment_replicas = Some(100);
    cfg.output.csv_replicas = Some(5);
    cfg.output_dir = dir.to_path_buf();
    cfg
}

#[test]
fn shipped_configs_parse() {
    for name in ["toy.toml", "expanding.toml", "sinusoidal.toml", "morris-lecar.toml"] {
        load(name);
    }
}

#[test]
fn shipped_morris_lecar_matches_defaults() {
    let cfg = load("morris-lecar.toml");
    let ModelConfig::MorrisLecar(m) = &cfg.model else { panic!("wrong model kind") };
    assert_eq!(m.params(), MorrisLecarParams::default());
    assert_eq!(m.channel_cap, pdmp_core::models::MAX_CHANNELS);
}

#[test]
fn outputs_do_not_depend_on_worker_count() {
    for name in ["toy.toml", "sinusoidal.toml"] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run_experiment(&small(load(name), a.path()), Some(1)).unwrap();
        let rb = run_experiment(&small(load(name), b.path()), Some(3)).unwrap();
        assert_eq!(ra.files.len(), rb.files.len());
        for (x, y) in ra.files.iter().zip(&rb.files) {
            if x.file == "config.toml" {
                continue; // records the output directory
            }
            assert_eq!(x, y, "{name}: {}", x.file);
        }
        let csv_a = std::fs::read(a.path().join("distance.csv")).unwrap();
        let csv_b = std::fs::read(b.path().join("distance.csv")).unwrap();
        assert_eq!(csv_a, csv_b);
    }
}

#[test]
fn rerun_is_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small(load("expanding.toml"), d.path());
    let first = run_experiment(&cfg, None).unwrap();
    let bytes = std::fs::read(d.path().join("coupled.csv")).unwrap();
    let second = run_experiment(&cfg, None).unwrap();
    assert_eq!(first.files, second.files);
    assert_eq!(bytes, std::fs::read(d.path().join("coupled.csv")).unwrap());
    let manifest = std::fs::read_to_string(d.path().join("manifest.toml")).unwrap();
    for f in &first.files {
        assert!(manifest.contains(&f.sha256));
    }
    assert!(!d.path().join("manifest.toml.tmp").exists());
}

#[test]
fn single_replica_writes_one_replica() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = load("toy.toml");
    cfg.experiment = ExperimentKind::Simulate;
    cfg.replicas = 1;
    cfg.output_dir = d.path().to_path_buf();
    run_experiment(&cfg, None).unwrap();
    let csv = std::fs::read_to_string(d.path().join("trajectories.csv")).unwrap();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    let col = header.split(',').position(|c| c == "replica").unwrap();
    let rows: Vec<&str> = lines.collect();
    assert!(rows.len() > 20);
    assert!(rows.iter().all(|r| r.split(',').nth(col) == Some("0")));
}

#[test]
fn summary_lists_bound_constants() {
    let d = tempfile::tempdir().unwrap();
    let report = run_experiment(&small(load("sinusoidal.toml"), d.path()), None).unwrap();
    for key in ["alpha", "b", "kappa_lip", "r", "gamma", "c", "p"] {
        assert!(report.summary.contains(&format!(" {key}=")) || report.summary.contains(&format!("[{key}=")), "{key} missing:\n{}", report.summary);
    }
    assert_eq!(report.envelope_pass, Some(true), "{}", report.summary);
    assert_eq!(report.exit_code(), 0);
}

#[test]
fn audit_failure_aborts_before_simulation() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = load("expanding.toml");
    let ModelConfig::Custom(c) = &mut cfg.model else { panic!() };
    c.alpha = vec![1.5, -0.25]; // mode 0 only contracts at rate 1
    cfg.output_dir = d.path().to_path_buf();
    let err = run_experiment(&cfg, None).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
    assert!(!d.path().join("coupled.csv").exists());
    assert!(std::fs::read_to_string(d.path().join("summary.txt")).unwrap().contains("FAIL"));
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_pdmp");
    let d = tempfile::tempdir().unwrap();
    let ok = Command::new(bin)
        .args(["audit", "--config"])
        .arg(shipped("morris-lecar.toml"))
        .arg("--out")
        .arg(d.path())
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("audit.rates = PASS"));

    let bad = d.path().join("bad.toml");
    std::fs::write(&bad, "experiment = \"audit\"\nhorizon = 1.0\nreplicas = 0\n[model]\nkind = \"toy\"\nlambda = [1.0, 1.0]\nalpha = 1.0\na = [1.0]\n").unwrap();
    let out = Command::new(bin).args(["simulate", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("replicas"));

    // Seed and replica overrides apply.
    let e = d.path().join("sim");
    let out = Command::new(bin)
        .args(["simulate", "--seed", "11", "--replicas", "2", "--workers", "2", "--config"])
        .arg(shipped("toy.toml"))
        .arg("--out")
        .arg(&e)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = std::fs::read_to_string(e.join("config.toml")).unwrap();
    assert!(cfg.contains("master-seed = 11") && cfg.contains("replicas = 2"), "{cfg}");
}

#[test]
fn envelope_is_tight_at_time_zero_and_failures_exit_one() {
    // Starts at the two ends of the invariant ball in opposite modes: the
    // initial distance 2r + 1 equals the envelope at t = 0.
    let d = tempfile::tempdir().unwrap();
    let cfg = small(load("sinusoidal.toml"), d.path());
    let mut report = run_experiment(&cfg, None).unwrap();
    let envelope = std::fs::read_to_string(d.path().join("envelope.csv")).unwrap();
    let first = envelope.lines().nth(1).unwrap();
    assert!(first.starts_with("0,3,"), "{first}");
    report.envelope_pass = Some(false);
    assert_eq!(report.exit_code(), 1);
}
