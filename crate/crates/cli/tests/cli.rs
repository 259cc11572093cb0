use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stableflow_core::ppo::Checkpoint;
use stableflow_core::{FlowParams, Gains, PolicyParams};

const SMALL: &str = r#"
[task]
kind = "free-point"

[ppo]
max_iters = 2
n_rollouts_per_iter = 3
horizon_steps = 40
minibatch_size = 32
epochs_per_iter = 2
seeds = [3]

[output]
checkpoint_every = 1
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stableflow"));
    c.env_remove("STABLEFLOW_OUT").env("RUST_LOG", "warn");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn identity_checkpoint(dir: &Path, dim: usize) -> PathBuf {
    let flow = FlowParams::identity(dim, 2, 8).unwrap();
    let policy = PolicyParams::with_sigma(flow, 1.0, vec![0.0; dim]).unwrap();
    let ckpt = Checkpoint::Nf {
        policy,
        gains: Gains::identity(dim),
    };
    write(dir, &format!("identity{dim}.json"), &ckpt.to_json().unwrap())
}

#[test]
fn train_writes_metrics_checkpoints_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.toml", SMALL);
    let o = run(dir.path(), &["--config", "c.toml", "--out", "o", "--quiet", "train"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run_dir = dir.path().join("o/nf/seed_3");
    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "iteration,mean_return,success_rate,mean_policy_std,mean_abs_u,mean_dist");
    assert_eq!(lines.len(), 3);
    assert!(run_dir.join("checkpoints/iter_0001.json").exists());
    assert!(run_dir.join("checkpoints/iter_0002.json").exists());
    assert!(run_dir.join("final.json").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("o/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"], serde_json::json!([3]));
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert!(manifest["code_version"].as_str().is_some());
}

#[test]
fn seeded_training_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.toml", SMALL);
    for out in ["a", "b"] {
        let o = run(dir.path(), &["--config", "c.toml", "--out", out, "--quiet", "train"]);
        assert_eq!(code(&o), 0);
    }
    let a = std::fs::read(dir.path().join("a/nf/seed_3/metrics.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/nf/seed_3/metrics.csv")).unwrap();
    assert_eq!(a, b);
    let a = std::fs::read(dir.path().join("a/nf/seed_3/final.json")).unwrap();
    let b = std::fs::read(dir.path().join("b/nf/seed_3/final.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_iterations_leave_header_and_initial_policy() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.toml", &SMALL.replace("max_iters = 2", "max_iters = 0"));
    let o = run(dir.path(), &["--config", "c.toml", "--out", "o", "--quiet", "train"]);
    assert_eq!(code(&o), 0);
    let metrics = std::fs::read_to_string(dir.path().join("o/nf/seed_3/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
    let ckpt = std::fs::read_to_string(dir.path().join("o/nf/seed_3/final.json")).unwrap();
    assert!(Checkpoint::from_json(&ckpt).is_ok());
}

#[test]
fn env_var_overrides_out_flag() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.toml", &SMALL.replace("max_iters = 2", "max_iters = 0"));
    let o = bin()
        .current_dir(dir.path())
        .env("STABLEFLOW_OUT", "from_env")
        .args(["--config", "c.toml", "--out", "from_flag", "--quiet", "train"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("from_env/manifest.json").exists());
    assert!(!dir.path().join("from_flag").exists());
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "unknown.toml", "[ppo]\nlearning_rat = 0.1\n");
    let o = run(dir.path(), &["--config", "unknown.toml", "train"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rat"));

    write(dir.path(), "section.toml", "[bogus]\nx = 1\n");
    assert_eq!(code(&run(dir.path(), &["--config", "section.toml", "train"])), 2);

    write(dir.path(), "bad.toml", "[ppo]\nclip_epsilon = -1.0\n");
    let o = run(dir.path(), &["--config", "bad.toml", "train"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("[ppo]"));

    assert_eq!(code(&run(dir.path(), &["--config", "missing.toml", "train"])), 2);
    assert_eq!(code(&run(dir.path(), &["verify"])), 2);
    assert_eq!(code(&run(dir.path(), &["sweep-sigma"])), 2);
}

#[test]
fn all_episodes_diverging_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("kind = \"free-point\"", "kind = \"free-point\"\nworkspace_bound = 0.01");
    write(dir.path(), "c.toml", &text);
    let o = run(dir.path(), &["--config", "c.toml", "--out", "o", "train"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn identity_checkpoint_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = identity_checkpoint(dir.path(), 2);
    write(dir.path(), "c.toml", "[task]\nkind = \"free-point\"\n");
    let o = run(
        dir.path(),
        &["--config", "c.toml", "--out", "o", "verify", "--checkpoint", ckpt.to_str().unwrap(), "--n-starts", "3"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let reports: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("o/verify_report.json")).unwrap()).unwrap();
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 3);
    assert!(reports.iter().all(|r| r["pass"] == true));
    assert!(reports[0]["worst_violation"].as_f64().unwrap() < 1e-8);
}

#[test]
fn failed_property_exits_one_with_witness() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = identity_checkpoint(dir.path(), 2);
    write(
        dir.path(),
        "c.toml",
        "[task]\nkind = \"free-point\"\n[verify]\nlong_horizon = 1.0\ndelta_pos = 1e-9\n",
    );
    let o = run(
        dir.path(),
        &["--config", "c.toml", "--out", "o", "verify", "--checkpoint", ckpt.to_str().unwrap(), "--n-starts", "2"],
    );
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("convergence") && err.contains("witness"), "{err}");
    let reports: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("o/verify_report.json")).unwrap()).unwrap();
    assert_eq!(reports[1]["pass"], false);
    assert!(reports[1]["witness"]["x"].is_array());
}

#[test]
fn negative_damping_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = identity_checkpoint(dir.path(), 2);
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&ckpt).unwrap()).unwrap();
    v["gains"]["D"] = serde_json::json!([[-1.0, 0.0], [0.0, -1.0]]);
    let bad = write(dir.path(), "bad.json", &v.to_string());
    for cmd in ["verify", "eval", "grid"] {
        let o = run(dir.path(), &["--out", "o", cmd, "--checkpoint", bad.to_str().unwrap()]);
        assert_eq!(code(&o), 2, "{cmd}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("D"), "{cmd}");
    }
}

#[test]
fn identity_grid_is_quadratic_and_overlay_matches() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = identity_checkpoint(dir.path(), 2);
    write(dir.path(), "c.toml", "[task]\nkind = \"free-point\"\n[ppo]\nhorizon_steps = 20\n");
    let o = run(
        dir.path(),
        &[
            "--config",
            "c.toml",
            "--out",
            "o",
            "--quiet",
            "grid",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--resolution",
            "5",
            "--window=-1,1,-0.5,0.5",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("o/grid.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    let xs: Vec<f64> = rows[0][1..].iter().map(|v| v.parse().unwrap()).collect();
    assert_eq!(xs, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
    for row in &rows[1..] {
        let y: f64 = row[0].parse().unwrap();
        for (x, v) in xs.iter().zip(&row[1..]) {
            let v: f64 = v.parse().unwrap();
            assert!((v - 0.5 * (x * x + y * y)).abs() < 1e-12);
        }
    }
    let overlay = std::fs::read_to_string(dir.path().join("o/overlay.jsonl")).unwrap();
    let mut n = 0;
    for line in overlay.lines() {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(r["x"], r["y"]);
        assert_eq!(r["y_ref"], serde_json::json!([0.0, 0.0]));
        n += 1;
    }
    assert_eq!(n, 5 * 21);
}

#[test]
fn grid_needs_two_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = identity_checkpoint(dir.path(), 3);
    write(dir.path(), "c.toml", "[task]\nkind = \"free-point\"\n[task.point]\ndim = 3\n");
    let o = run(dir.path(), &["--config", "c.toml", "--out", "o", "grid", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn eval_reads_start_file() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = identity_checkpoint(dir.path(), 2);
    write(dir.path(), "c.toml", "[task]\nkind = \"free-point\"\n[ppo]\nhorizon_steps = 10\n");
    write(dir.path(), "starts.json", r#"[[0.1, 0.0], {"x": [0.0, 0.2], "xdot": [0.1, 0.0]}]"#);
    let o = run(
        dir.path(),
        &["--config", "c.toml", "--out", "o", "--quiet", "eval", "--checkpoint", ckpt.to_str().unwrap(), "--starts", "starts.json"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let traj = std::fs::read_to_string(dir.path().join("o/eval/traj_001.jsonl")).unwrap();
    assert_eq!(traj.lines().count(), 11);
    let first: serde_json::Value = serde_json::from_str(traj.lines().next().unwrap()).unwrap();
    assert_eq!(first["x"], serde_json::json!([0.0, 0.2]));
    assert_eq!(first["xdot"], serde_json::json!([0.1, 0.0]));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("o/eval/summary.json")).unwrap()).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 2);

    write(dir.path(), "wrong.json", "[[1.0, 2.0, 3.0]]");
    let o = run(
        dir.path(),
        &["--config", "c.toml", "--out", "o", "eval", "--checkpoint", ckpt.to_str().unwrap(), "--starts", "wrong.json"],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn sweep_writes_one_row_per_kind_and_sigma() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("max_iters = 2", "max_iters = 1").replace("checkpoint_every = 1", "checkpoint_every = 5");
    write(dir.path(), "c.toml", &text);
    let o = run(dir.path(), &["--config", "c.toml", "--out", "o", "--quiet", "sweep-sigma", "--sigmas", "1,2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("o/sweep_summary.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "policy_kind,sigma_init,itr90,mean_dist,mean_abs_u");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("nf,1,"));
    assert!(lines[4].starts_with("baseline,2,"));
    assert!(dir.path().join("o/sweep/baseline/sigma_2/seed_3/metrics.csv").exists());
}
