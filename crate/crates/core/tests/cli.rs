//! End-to-end checks of the command-line interface: exit codes, artifact
//! contents, and byte-identical reruns.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_bgw")
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .unwrap()
}

fn model(name: &str) -> PathBuf {
    repo_root().join("models").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().unwrap()
}

fn find_artifact(dir: &Path, prefix: &str) -> PathBuf {
    std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .find(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with(prefix))
                .unwrap_or(false)
        })
        .unwrap_or_else(|| panic!("no {prefix}* in {}", dir.display()))
}

#[test]
fn validate_exit_codes() {
    let ok = run(&["validate", "--config", model("binary_d1.json").to_str().unwrap()]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let stdout = String::from_utf8_lossy(&ok.stdout);
    assert!(stdout.contains("rho = 1.5"), "{stdout}");
    assert!(stdout.contains("0.333"), "{stdout}");

    // point mass: supercritical but singular covariance
    let singular = run(&["validate", "--config", model("doubling_d1.json").to_str().unwrap()]);
    assert_eq!(singular.status.code(), Some(3));
    let stdout = String::from_utf8_lossy(&singular.stdout);
    assert!(stdout.contains("rho = 2"), "{stdout}");

    // periodic type swap: not primitive
    let periodic = run(&["validate", "--config", model("periodic_d2.json").to_str().unwrap()]);
    assert_eq!(periodic.status.code(), Some(3));

    // unparseable file
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let parse = run(&["validate", "--config", bad.to_str().unwrap()]);
    assert_eq!(parse.status.code(), Some(2));
}

fn write_sim_config(dir: &Path, model_file: &str, horizon: usize, seed: u64, level: &str) -> PathBuf {
    let cfg = dir.join("sim.json");
    let text = format!(
        r#"{{"model": "{}", "horizon": {horizon}, "seed": {seed}, "level": "{level}"}}"#,
        model(model_file).display()
    );
    std::fs::write(&cfg, text).unwrap();
    cfg
}

#[test]
fn simulate_doubling_rows_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_sim_config(dir.path(), "doubling_d1.json", 5, 1, "totals");
    let out1 = dir.path().join("run1");
    let out2 = dir.path().join("run2");
    for out in [&out1, &out2] {
        let r = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    let t1 = find_artifact(&out1, "trajectory_");
    let t2 = find_artifact(&out2, "trajectory_");
    let b1 = std::fs::read(&t1).unwrap();
    let b2 = std::fs::read(&t2).unwrap();
    assert_eq!(b1, b2, "reruns must be byte-identical");

    let text = String::from_utf8(b1).unwrap();
    let x: Vec<&str> = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("generation"))
        .map(|l| l.split(',').nth(2).unwrap())
        .collect();
    assert_eq!(x, vec!["1", "2", "4", "8", "16", "32"]);
}

#[test]
fn simulate_extinct_path_status() {
    // all-zero offspring law dies in one step
    let dir = tempfile::tempdir().unwrap();
    let model_file = dir.path().join("dies.json");
    std::fs::write(
        &model_file,
        r#"{"name": "dies", "dim": 1, "laws": [[[[0], "1.0"]]]}"#,
    )
    .unwrap();
    let cfg = dir.path().join("sim.json");
    std::fs::write(
        &cfg,
        format!(
            r#"{{"model": "{}", "horizon": 5, "seed": 3, "level": "totals"}}"#,
            model_file.display()
        ),
    )
    .unwrap();
    let out = dir.path().join("out");
    let r = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(r.status.success());
    let text = std::fs::read_to_string(find_artifact(&out, "trajectory_")).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    // header + generation 0 + generation 1
    assert_eq!(rows.len(), 3);
    assert!(rows[2].contains("extinct-at-1"), "{text}");
}

#[test]
fn estimate_doubling_and_region() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_sim_config(dir.path(), "doubling_d1.json", 6, 1, "totals");
    let out = dir.path().join("out");
    let r = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(r.status.success());
    let traj = find_artifact(&out, "trajectory_");

    let est_cfg = dir.path().join("est.json");
    std::fs::write(
        &est_cfg,
        format!(r#"{{"trajectory": "{}"}}"#, traj.display()),
    )
    .unwrap();
    let r = run(&["estimate", "--config", est_cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = std::fs::read_to_string(find_artifact(&out, "estimates_")).unwrap();
    let mle_line = text
        .lines()
        .find(|l| l.starts_with("mle_means"))
        .unwrap();
    let value: f64 = mle_line.rsplit(',').next().unwrap().parse().unwrap();
    assert!((value - 2.0).abs() < 1e-14);
    let qsl_line = text.lines().find(|l| l.starts_with("qsl_cov")).unwrap();
    let value: f64 = qsl_line.rsplit(',').next().unwrap().parse().unwrap();
    assert!(value.abs() < 1e-14);
}

#[test]
fn estimate_counts_level_guard() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_sim_config(dir.path(), "binary_d1.json", 8, 5, "counts");
    let out = dir.path().join("out");
    let r = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(r.status.success());
    let traj = find_artifact(&out, "trajectory_");

    let est_cfg = dir.path().join("est.json");
    std::fs::write(
        &est_cfg,
        format!(
            r#"{{"trajectory": "{}", "require": ["mle"]}}"#,
            traj.display()
        ),
    )
    .unwrap();
    let r = run(&["estimate", "--config", est_cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&r.stderr);
    assert!(stderr.contains("mle"), "{stderr}");
}

#[test]
fn estimate_region_report_with_true_hypothesis() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_sim_config(dir.path(), "binary_d1.json", 12, 23, "totals");
    let out = dir.path().join("out");
    let r = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(r.status.success());
    let traj = find_artifact(&out, "trajectory_");

    let hyp = dir.path().join("hyp.json");
    std::fs::write(&hyp, r#"{"a0": [["1.5"]], "k0": [[["0.75"]]]}"#).unwrap();
    let est_cfg = dir.path().join("est.json");
    std::fs::write(
        &est_cfg,
        format!(
            r#"{{"trajectory": "{}", "hypothesis": "{}", "cov": "empirical"}}"#,
            traj.display(),
            hyp.display()
        ),
    )
    .unwrap();
    let r = run(&["estimate", "--config", est_cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(find_artifact(&out, "region_")).unwrap())
            .unwrap();
    assert_eq!(report["horizon"], 12);
    assert!(report["verdict"] == "inside" || report["verdict"] == "outside");
}

#[test]
fn mc_single_replication_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mc.json");
    std::fs::write(
        &cfg,
        format!(
            r#"{{"model": "{}", "horizon": 6, "replications": 1, "seed": 5, "level": "totals"}}"#,
            model("doubling_d1.json").display()
        ),
    )
    .unwrap();
    let out1 = dir.path().join("a");
    let out2 = dir.path().join("b");
    for out in [&out1, &out2] {
        let r = run(&["mc", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    let d1 = std::fs::read(find_artifact(&out1, "digest_")).unwrap();
    let d2 = std::fs::read(find_artifact(&out2, "digest_")).unwrap();
    assert_eq!(d1, d2);
    let c1 = std::fs::read(find_artifact(&out1, "replications_")).unwrap();
    let c2 = std::fs::read(find_artifact(&out2, "replications_")).unwrap();
    assert_eq!(c1, c2);

    let digest: serde_json::Value = serde_json::from_slice(&d1).unwrap();
    assert_eq!(digest["replications"], 1);
    assert_eq!(digest["surviving"], 1);
    assert!(digest["mle_err"]["mean"].as_f64().unwrap() < 1e-14);
}

#[test]
fn mc_seed_required() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mc.json");
    std::fs::write(
        &cfg,
        format!(
            r#"{{"model": "{}", "horizon": 6, "replications": 2}}"#,
            model("binary_d1.json").display()
        ),
    )
    .unwrap();
    let r = run(&["mc", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
}
