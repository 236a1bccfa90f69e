use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn gaintune(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gaintune"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn manifest(dir: &Path, cmd: &str) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{cmd}.manifest.json"))).unwrap()).unwrap()
}

#[test]
fn gradcheck_default_config_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = gaintune(dir.path(), &["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["entries"].as_array().unwrap().len(), 17);
}

#[test]
fn gradcheck_corruption_exits_2_naming_block() {
    let dir = tempfile::tempdir().unwrap();
    let o = gaintune(
        dir.path(),
        &[
            "gradcheck",
            "--samples",
            "1",
            "--horizon",
            "10",
            "--corrupt",
            "controller.dtheta",
        ],
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("controller.dtheta"));
}

#[test]
fn gradcheck_smoke_is_fast() {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let o = gaintune(dir.path(), &["gradcheck", "--samples", "1", "--horizon", "10"]);
    assert_eq!(code(&o), 0);
    assert!(t.elapsed().as_secs_f64() < 1.0, "took {:?}", t.elapsed());
}

#[test]
fn config_errors_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[quad]\nmass = 1.0\n").unwrap();
    let o = gaintune(
        dir.path(),
        &["tune", "--method", "adj-fixed", "--config", cfg.to_str().unwrap()],
    );
    assert_eq!(code(&o), 4);
    let o = gaintune(dir.path(), &["tune", "--method", "nonsense"]);
    assert_eq!(code(&o), 4);
    let o = gaintune(
        dir.path(),
        &[
            "gradcheck",
            "--config",
            dir.path().join("absent.toml").to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 4);
}

#[test]
fn missing_artifacts_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let absent = dir.path().join("absent.json");
    let o = gaintune(dir.path(), &["eval", "--checkpoint", absent.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let o = gaintune(dir.path(), &["plotdata", "--checkpoint", absent.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let o = gaintune(
        dir.path(),
        &["train", "--epochs", "0", "--warm-start", absent.to_str().unwrap()],
    );
    assert_eq!(code(&o), 3);
}

#[test]
fn train_zero_epochs_writes_only_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = gaintune(dir.path(), &["train", "--epochs", "0"]);
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("checkpoint.json").is_file());
    assert!(!dir.path().join("metrics.csv").exists());
    gaintune::policy::Checkpoint::load(&dir.path().join("checkpoint.json")).unwrap();
}

#[test]
fn train_writes_metrics_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(
        &cfg,
        "[sim]\nhorizon_steps = 100\n[train]\nbatch = 2\nhidden = 8\n[train.tasks]\nmin_duration_s = 1.0\n",
    )
    .unwrap();
    let o = gaintune(
        dir.path(),
        &["train", "--epochs", "2", "--config", cfg.to_str().unwrap()],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "epoch,mean_loss,mean_rmse,crash_count,grad_norm,wall_ms"
    );
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn fixed_engines_tune_identically_and_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["tune", "--iterations", "10", "--horizon", "300"];
    for m in ["adj-fixed", "dt-fixed"] {
        let mut a = args.to_vec();
        a.extend(["--method", m]);
        assert_eq!(code(&gaintune(dir.path(), &a)), 0);
    }
    let a = read_csv(&dir.path().join("tune_adj-fixed.csv"));
    let b = read_csv(&dir.path().join("tune_dt-fixed.csv"));
    assert_eq!(a.len(), 11);
    for (ra, rb) in a.iter().zip(&b) {
        let (la, lb): (f64, f64) = (ra[1].parse().unwrap(), rb[1].parse().unwrap());
        assert!((la - lb).abs() <= 1e-6 * la.abs());
    }
    let first_hash = manifest(dir.path(), "tune")["config_hash"].clone();
    let mut again = args.to_vec();
    again.extend(["--method", "adj-fixed"]);
    assert_eq!(code(&gaintune(dir.path(), &again)), 0);
    let c = read_csv(&dir.path().join("tune_adj-fixed.csv"));
    for (ra, rc) in a.iter().zip(&c) {
        assert_eq!(ra[..3], rc[..3]);
    }
    assert_eq!(manifest(dir.path(), "tune")["config_hash"], first_hash);
}

#[test]
fn history_tuning_is_flagged_unstable() {
    let dir = tempfile::tempdir().unwrap();
    let o = gaintune(
        dir.path(),
        &["tune", "--method", "dt-history", "--iterations", "200", "--lr", "0.05"],
    );
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("[unstable]"));
    let rows = read_csv(&dir.path().join("tune_dt-history.csv"));
    let first: f64 = rows[0][1].parse().unwrap();
    assert!(rows
        .iter()
        .any(|r| r[1].parse::<f64>().map_or(true, |l| !(l <= 10.0 * first))));
}

#[test]
fn adaptive_tuning_not_worse_than_fixed() {
    let dir = tempfile::tempdir().unwrap();
    for m in ["adj-fixed", "adj-adaptive"] {
        assert_eq!(
            code(&gaintune(dir.path(), &["tune", "--method", m, "--iterations", "200"])),
            0
        );
    }
    let last = |m: &str| -> f64 {
        read_csv(&dir.path().join(format!("tune_{m}.csv"))).last().unwrap()[2]
            .parse()
            .unwrap()
    };
    assert!(last("adj-adaptive") <= last("adj-fixed"));
}

#[test]
fn eval_rows_match_grid() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&gaintune(dir.path(), &["train", "--epochs", "0"])), 0);
    let cfg = dir.path().join("eval.toml");
    std::fs::write(&cfg, "[eval]\nrepeats = 1\n").unwrap();
    let ckpt = dir.path().join("checkpoint.json");
    let o = gaintune(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--horizon",
            "100",
            "--config",
            cfg.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert!(text.starts_with("wind,velocity,method,category,mean,sd"));
    assert_eq!(text.lines().count() - 1, 3 * 3 * 3 * 2);
}

#[test]
fn plotdata_hover_estimate_converges() {
    let dir = tempfile::tempdir().unwrap();
    let o = gaintune(
        dir.path(),
        &[
            "plotdata",
            "--preset",
            "hover-wind",
            "--wind",
            "1.0",
            "--horizon",
            "500",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&dir.path().join("plot_hover-wind_disturbance.csv"));
    assert_eq!(rows.len(), 500);
    // Final 0.5 s window.
    for r in &rows[450..] {
        let est: f64 = r[1].parse().unwrap();
        let truth: f64 = r[4].parse().unwrap();
        assert!((est - truth).abs() < 0.05 * truth.abs(), "{est} vs {truth}");
    }
    assert!(dir.path().join("plot_hover-wind_tracking.csv").is_file());
    assert!(dir.path().join("plot_hover-wind_gains.csv").is_file());
}

#[test]
fn seed_flag_lands_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&gaintune(dir.path(), &["train", "--epochs", "0", "--seed", "17"])),
        0
    );
    let m = manifest(dir.path(), "train");
    assert_eq!(m["seed"], 17);
    assert!(m["effective_config"].as_str().unwrap().contains("seed = 17"));
    assert!(!m["revision"].as_str().unwrap().is_empty());
}
