//! End-to-end checks of the `slac` binary: config handling, determinism,
//! verify suites, rollout dumps, checkpoint validation.

use std::path::Path;
use std::process::{Command, Output};

fn slac() -> Command {
    Command::new(env!("CARGO_BIN_EXE_slac"))
}

fn run(args: &[&str]) -> Output {
    slac().args(args).output().expect("spawn slac")
}

fn write_tiny_config(dir: &Path, out_name: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    let out_dir = dir.join(out_name);
    let config = format!(
        r#"
out_dir = "{}"

[train]
seed = 3
total_env_steps = 120
pretrain_iters = 400
pretrain_random_steps = 60
lr_model = 1e-3
batch_size_model = 8
batch_size_rl = 4
tau = 2
latent1_dim = 1
latent2_dim = 2
hidden_width = 8
feature_dim = 4
eval_every = 50
eval_episodes = 2
log_every = 1

[train.env]
kind = "lgss_pomdp"
max_episode_steps = 20
"#,
        out_dir.display()
    );
    std::fs::write(&path, config).unwrap();
    path
}

#[test]
fn missing_config_file_names_the_path() {
    let out = run(&["train", "--config", "/nonexistent/nowhere.toml"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("/nonexistent/nowhere.toml"), "stderr: {stderr}");
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_tiny_config(dir.path(), "out");
    let out = run(&[
        "train",
        "--config",
        path.to_str().unwrap(),
        "--override",
        "train.bogus_knob=1",
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bogus_knob"), "stderr: {stderr}");
}

#[test]
fn override_is_reflected_in_resolved_snapshot_and_runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_tiny_config(dir.path(), "out_a");

    // Bare key routes into [train]; the snapshot must reflect it.
    let out = run(&[
        "train",
        "--config",
        path.to_str().unwrap(),
        "--override",
        "seed=7",
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let snapshot =
        std::fs::read_to_string(dir.path().join("out_a").join("config.resolved.toml")).unwrap();
    assert!(snapshot.contains("seed = 7"), "snapshot: {snapshot}");

    // Same config + seed in a second directory: identical metrics files.
    let out = run(&[
        "train",
        "--config",
        path.to_str().unwrap(),
        "--override",
        "seed=7",
        "--override",
        &format!("out_dir=\"{}\"", dir.path().join("out_b").display()),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let a = std::fs::read_to_string(dir.path().join("out_a").join("metrics.jsonl")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("out_b").join("metrics.jsonl")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b, "metric streams differ between identical runs");
}

#[test]
fn out_root_env_var_prefixes_relative_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_tiny_config(dir.path(), "ignored");
    let out = slac()
        .args([
            "train",
            "--config",
            path.to_str().unwrap(),
            "--override",
            "out_dir=\"nested/run\"",
            "--override",
            "total_env_steps=70",
        ])
        .env("SLAC_OUT_ROOT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("nested/run/config.resolved.toml").exists());
}

#[test]
fn verify_unknown_suite_lists_valid_names() {
    let out = run(&["verify", "nonsense"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    for name in ["gradcheck", "distributions", "elbo_bound", "kl_identity", "replay", "oracle"] {
        assert!(stderr.contains(name), "stderr missing {name}: {stderr}");
    }
}

#[test]
fn verify_replay_suite_passes() {
    let out = run(&["verify", "replay"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "stdout: {stdout}");
    assert!(stdout.lines().count() >= 3);
    assert!(stdout.lines().all(|l| l.starts_with("PASS")), "stdout: {stdout}");
}

#[test]
fn verify_oracle_suite_passes() {
    let out = run(&["verify", "oracle"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().all(|l| l.starts_with("PASS")), "stdout: {stdout}");
}

#[test]
fn rollout_eval_and_resume_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_tiny_config(dir.path(), "run");
    let out_dir = dir.path().join("run");

    let out = run(&["train", "--config", path.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let ckpt = out_dir.join("final.ckpt");
    assert!(ckpt.exists());

    // Posterior reconstructions must beat prior generations on the same data.
    let mut errors = std::collections::HashMap::new();
    for mode in ["posterior", "prior"] {
        let dump = out_dir.join(format!("{mode}.jsonl"));
        let out = run(&[
            "rollout",
            "--config",
            path.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--mode",
            mode,
            "--out",
            dump.to_str().unwrap(),
            "--windows",
            "16",
        ]);
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
        let text = std::fs::read_to_string(&dump).unwrap();
        let mut total = 0.0;
        let mut count = 0usize;
        for line in text.lines() {
            let record: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(record["mode"], mode);
            let pred = record["predicted_mean"].as_array().unwrap();
            let truth = record["ground_truth"].as_array().unwrap();
            for (p, t) in pred.iter().zip(truth) {
                let d = p.as_f64().unwrap() - t.as_f64().unwrap();
                total += d * d;
                count += 1;
            }
        }
        errors.insert(mode, total / count as f64);
    }
    assert!(
        errors["posterior"] < errors["prior"],
        "posterior mse {} should beat prior mse {}",
        errors["posterior"],
        errors["prior"]
    );

    // Eval prints a JSON summary.
    let out = run(&[
        "eval",
        "--config",
        path.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--episodes",
        "3",
    ]);
    assert!(out.status.success());
    let summary: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stdout).trim()).unwrap();
    assert_eq!(summary["episodes"], 3);
    assert!(summary["mean_return"].as_f64().unwrap().is_finite());

    // Resume on a finished run loads the checkpoint and exits immediately.
    let out = run(&["train", "--config", path.to_str().unwrap(), "--resume"]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("resumed"), "stderr: {stderr}");
}

#[test]
fn malformed_checkpoint_magic_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_tiny_config(dir.path(), "out");
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"WRONGMAGIC______").unwrap();
    let out = run(&[
        "eval",
        "--config",
        path.to_str().unwrap(),
        "--checkpoint",
        bad.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("magic"), "stderr: {stderr}");
}

#[test]
fn rollout_mode_validated() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_tiny_config(dir.path(), "out");
    let out = run(&[
        "rollout",
        "--config",
        path.to_str().unwrap(),
        "--checkpoint",
        "whatever.ckpt",
        "--mode",
        "sideways",
        "--out",
        "x.jsonl",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sideways"));
}
