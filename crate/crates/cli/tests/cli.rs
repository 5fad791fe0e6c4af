use std::path::Path;
use std::process::Command;

use btw_cli::config::{InitialSpec, NoiseSpec};
use btw_cli::presets::{deterministic_1d, quiet_monitors, DETERMINISTIC_EXTINCTION_TIME};
use btw_cli::{cmd_bound, cmd_extinction_stats, cmd_simulate, cmd_verify, CliError, RunConfig, SeedRange};
use btw_core::Profile;

fn btwlab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_btwlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, cfg: &serde_json::Value) -> String {
    let p = dir.join(name);
    std::fs::write(&p, cfg.to_string()).unwrap();
    p.to_string_lossy().into_owned()
}

fn constant_noise() -> NoiseSpec {
    NoiseSpec {
        profiles: vec![Profile::Constant { value: 1.0 }],
        path_csv: None,
    }
}

#[test]
fn zero_datum_is_extinct_at_start() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        initial: InitialSpec::Constant { value: 0.0 },
        out: dir.path().to_path_buf(),
        ..RunConfig::default()
    };
    let s = cmd_simulate(&cfg).unwrap();
    assert_eq!(s.extinction_time, Some(0.0));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(json["extinction_time"], 0.0);
    // the resolved config is echoed in full
    assert_eq!(json["config"]["scheme"]["newton_max_iter"], 50);
    assert!(dir.path().join("series.csv").is_file());
}

#[test]
fn deterministic_preset_matches_frozen_time() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = deterministic_1d(1e-3, 128);
    cfg.out = dir.path().to_path_buf();
    let t = cmd_simulate(&cfg).unwrap().extinction_time.unwrap();
    assert!((t / DETERMINISTIC_EXTINCTION_TIME - 1.0).abs() <= 0.05, "{t}");
}

#[test]
fn missing_input_file_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = serde_json::json!({
        "initial": { "kind": "csv", "path": dir.path().join("absent.csv") },
    });
    let path = write_config(dir.path(), "c.json", &cfg);
    let o = btwlab(&["simulate", "--config", &path, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not exist"));
    assert!(!out.exists());

    let missing_cfg = dir.path().join("nope.json");
    let o = btwlab(&["simulate", "--config", missing_cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_ranges_are_validation_errors() {
    let mut cfg = RunConfig::default();
    cfg.scheme.dt = -1.0;
    assert!(matches!(cmd_simulate(&cfg), Err(CliError::Validation(_))));
    let o = btwlab(&["extinction-stats", "--seeds", "5..2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn csv_datum_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let g = btw_core::SpatialGrid::unit_interval(32).unwrap();
    let x0 = btw_core::GridFunction::constant(g, 1.0);
    let csv = dir.path().join("x0.csv");
    std::fs::write(&csv, x0.to_csv()).unwrap();
    let mut cfg = RunConfig {
        initial: InitialSpec::Csv { path: csv },
        out: dir.path().join("a"),
        monitors: quiet_monitors(),
        ..RunConfig::default()
    };
    let a = cmd_simulate(&cfg).unwrap();
    cfg.initial = InitialSpec::Constant { value: 1.0 };
    cfg.out = dir.path().join("b");
    let b = cmd_simulate(&cfg).unwrap();
    assert_eq!(a.extinction_time, b.extinction_time);
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        out: dir.path().to_path_buf(),
        seed: 3,
        ..RunConfig::default()
    };
    cmd_simulate(&cfg).unwrap();
    let first = std::fs::read(dir.path().join("series.csv")).unwrap();
    let first_summary = std::fs::read(dir.path().join("summary.json")).unwrap();
    cmd_simulate(&cfg).unwrap();
    assert_eq!(std::fs::read(dir.path().join("series.csv")).unwrap(), first);
    assert_eq!(std::fs::read(dir.path().join("summary.json")).unwrap(), first_summary);
}

#[test]
fn noiseless_seeds_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        noise: NoiseSpec::default(),
        out: dir.path().to_path_buf(),
        monitors: quiet_monitors(),
        ..RunConfig::default()
    };
    let s = cmd_extinction_stats(&cfg, SeedRange { start: 0, end: 1 }, 2).unwrap();
    assert_eq!(s.rows.len(), 2);
    assert!(s.rows[0].extinction_time.is_some());
    assert_eq!(s.rows[0].extinction_time, s.rows[1].extinction_time);
}

#[test]
fn censoring_shrinks_with_horizon() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig {
        noise: constant_noise(),
        monitors: quiet_monitors(),
        horizon: 0.13,
        out: dir.path().join("short"),
        ..RunConfig::default()
    };
    let seeds = SeedRange { start: 0, end: 63 };
    let short = cmd_extinction_stats(&cfg, seeds, 4).unwrap();
    cfg.horizon = 0.26;
    cfg.out = dir.path().join("long");
    let long = cmd_extinction_stats(&cfg, seeds, 4).unwrap();
    assert!(short.censored_fraction > 0.0);
    assert!(long.censored_fraction < short.censored_fraction);
    assert_eq!(long.quantiles.len(), 5);
}

#[test]
fn worker_count_does_not_change_stats() {
    let dir = tempfile::tempdir().unwrap();
    let out = |w: &str| dir.path().join(w);
    for w in ["1", "8"] {
        let o = btwlab(&[
            "extinction-stats",
            "--seeds",
            "0..15",
            "--workers",
            w,
            "--out",
            out(w).to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = std::fs::read(out("1").join("stats.csv")).unwrap();
    let b = std::fs::read(out("8").join("stats.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn verify_default_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = btwlab(&["verify", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(dir.path().join("verify.json").is_file());
}

#[test]
fn verify_flags_oversized_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig {
        out: dir.path().to_path_buf(),
        ..RunConfig::default()
    };
    cfg.scheme.dt *= 100.0;
    let path = write_config(dir.path(), "c.json", &serde_json::to_value(&cfg).unwrap());
    let o = btwlab(&["verify", "--config", &path]);
    assert_eq!(o.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let failed: Vec<&str> = report["failed"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert!(failed.contains(&"newton") || failed.contains(&"positivity"), "{failed:?}");
}

#[test]
fn verify_noiseless_uses_constant_bound() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        noise: NoiseSpec::default(),
        out: dir.path().to_path_buf(),
        ..RunConfig::default()
    };
    let r = cmd_verify(&cfg).unwrap();
    assert!(r.pass, "{:?}", r.failed);
    let sup = r.checks.iter().find(|c| c.name == "supersolution").unwrap();
    assert_eq!(sup.detail["mode"], "constant");
}

#[test]
fn bound_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = btwlab(&["bound", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("q = inf"));
    assert!(text.contains("alpha = 0\n"));
    assert_eq!(text.lines().filter(|l| l.contains(',')).count(), 101);

    let mut cfg = RunConfig {
        out: dir.path().to_path_buf(),
        ..RunConfig::default()
    };
    cfg.bound.d = Some(3);
    cfg.bound.p = Some(2.5);
    let b = cmd_bound(&cfg).unwrap();
    assert!((b.params.p_tilde - 2.0).abs() < 1e-15);
    assert!((b.params.alpha - 2.0 / 3.0).abs() < 1e-15);

    cfg.initial = InitialSpec::Constant { value: 0.0 };
    assert_eq!(cmd_bound(&cfg).unwrap().l_star, 0.0);

    cfg.bound.p = Some(1.5);
    assert!(matches!(cmd_bound(&cfg), Err(CliError::Validation(_))));
}

#[test]
fn shipped_config_is_the_default_and_verifies() {
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/default.json");
    let cfg = RunConfig::from_file(&shipped).unwrap();
    let mut expected = RunConfig::default();
    expected.scheme.reg.delta = cfg.scheme.reg.delta;
    assert!((cfg.scheme.reg.delta - 1.6e-5).abs() < 1e-20);
    assert_eq!(cfg, expected);
    let dir = tempfile::tempdir().unwrap();
    let o = btwlab(&[
        "verify",
        "--config",
        shipped.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
}
