//! Experiment runner and verification entry points.
//!
//! Subcommands: `train` (pretrain + training loop from a TOML config),
//! `verify` (named oracle-backed property suites), `rollout` (dump model
//! predictions as JSON lines), `eval` (evaluate a checkpointed policy).
//!
//! Run configs are TOML with a `[train]` table; `--override key=value` flags
//! patch the parsed config (dotted paths; bare keys route into `train`). The
//! resolved snapshot is written into the run directory before anything runs.
//! The `SLAC_OUT_ROOT` environment variable prefixes relative out_dir paths.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use slac_core::latent_model::{FilterNoise, RolloutMode, RolloutRecord};
use slac_core::replay::WindowBatch;
use slac_core::trainer::{TrainConfig, Trainer};
use slac_core::verify;

#[derive(Parser)]
#[command(name = "slac", about = "Desk-scale stochastic latent actor-critic experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run pretraining plus the training loop from a config file.
    Train {
        /// Path to the TOML run config.
        #[arg(long)]
        config: PathBuf,
        /// Config overrides as dotted key=value pairs, e.g. train.seed=7.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Resume from <out_dir>/latest.ckpt (or final.ckpt).
        #[arg(long)]
        resume: bool,
    },
    /// Run a named verification suite and print one line per property.
    Verify {
        /// One of: gradcheck, distributions, elbo_bound, kl_identity, replay, oracle.
        suite: String,
    },
    /// Dump posterior / conditional-prior / prior rollouts as JSON lines.
    Rollout {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// One of: posterior, conditional_prior, prior.
        #[arg(long)]
        mode: String,
        #[arg(long)]
        out: PathBuf,
        /// Number of replay windows to roll out.
        #[arg(long, default_value_t = 8)]
        windows: usize,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpointed policy.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    /// Run directory: resolved config snapshot, metrics.jsonl, checkpoints.
    out_dir: PathBuf,
    train: TrainConfig,
}

fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    let mut value: toml::Value =
        toml::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))?;
    for spec in overrides {
        apply_override(&mut value, spec)?;
    }
    let config: RunConfig = value.try_into().map_err(|e| anyhow!("invalid config: {e}"))?;
    Ok(config)
}

/// Patch one dotted key=value override into the parsed TOML. Bare keys that
/// are not RunConfig top-level fields route into the [train] table.
fn apply_override(value: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override {spec:?} is not of the form key=value"))?;
    let mut path: Vec<&str> = key.split('.').collect();
    if path.len() == 1 && !["out_dir", "train"].contains(&path[0]) {
        path.insert(0, "train");
    }
    // Parse the value as TOML; fall back to a plain string.
    let parsed: toml::Value = match toml::from_str::<toml::Value>(&format!("v = {raw}")) {
        Ok(toml::Value::Table(t)) => t["v"].clone(),
        _ => toml::Value::String(raw.to_string()),
    };
    let mut node = value;
    for (i, part) in path.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| anyhow!("override {key:?}: {part:?} is not a table"))?;
        if i + 1 == path.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!()
}

fn resolve_out_dir(dir: &Path) -> PathBuf {
    if dir.is_relative() {
        if let Ok(root) = std::env::var("SLAC_OUT_ROOT") {
            return PathBuf::from(root).join(dir);
        }
    }
    dir.to_path_buf()
}

fn cmd_train(config_path: &Path, overrides: &[String], resume: bool) -> Result<()> {
    let config = load_config(config_path, overrides)?;
    let out_dir = resolve_out_dir(&config.out_dir);
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("cannot create run directory {}", out_dir.display()))?;

    // Snapshot the resolved config before any work happens.
    let snapshot = toml::to_string_pretty(&RunConfig {
        out_dir: out_dir.clone(),
        train: config.train.clone(),
    })?;
    std::fs::write(out_dir.join("config.resolved.toml"), snapshot)?;

    let mut trainer = Trainer::new(config.train)?;
    trainer.out_dir = Some(out_dir.clone());

    if resume {
        let latest = out_dir.join("latest.ckpt");
        let fallback = out_dir.join("final.ckpt");
        let path = if latest.exists() {
            latest
        } else if fallback.exists() {
            fallback
        } else {
            bail!("--resume: no latest.ckpt or final.ckpt in {}", out_dir.display());
        };
        trainer.restore_checkpoint(&path)?;
        eprintln!("resumed from {} at {} env steps", path.display(), trainer.env_steps);
        trainer.train_loop()?;
    } else {
        trainer.run()?;
    }
    let last_eval = trainer.metrics.iter().rev().find(|m| m.kind == "eval");
    match last_eval {
        Some(m) => println!(
            "done: {} env steps, last eval mean return {:.3}",
            trainer.env_steps,
            m.eval_mean.unwrap_or(f64::NAN)
        ),
        None => println!("done: {} env steps", trainer.env_steps),
    }
    Ok(())
}

fn cmd_verify(suite: &str) -> Result<bool> {
    let results = verify::run_suite(suite).map_err(|e| anyhow!("{e}"))?;
    let mut all_pass = true;
    for r in &results {
        println!("{} {} — {}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail);
        all_pass &= r.pass;
    }
    Ok(all_pass)
}

fn cmd_rollout(
    config_path: &Path,
    checkpoint: &Path,
    mode: &str,
    out: &Path,
    windows: usize,
    overrides: &[String],
) -> Result<()> {
    let mode = match mode {
        "posterior" => RolloutMode::Posterior,
        "conditional_prior" => RolloutMode::ConditionalPrior,
        "prior" => RolloutMode::Prior,
        other => bail!("unknown rollout mode {other:?} (posterior, conditional_prior, prior)"),
    };
    let config = load_config(config_path, overrides)?;
    let mut trainer = Trainer::new(config.train)?;
    trainer.restore_checkpoint(checkpoint)?;
    let records = rollout_records(&mut trainer, mode, windows)?;
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    std::fs::write(out, lines)?;
    println!("wrote {} rollout records to {}", records.len(), out.display());
    Ok(())
}

fn rollout_records(
    trainer: &mut Trainer,
    mode: RolloutMode,
    windows: usize,
) -> Result<Vec<RolloutRecord>> {
    let tau = trainer.config.tau;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(trainer.config.seed ^ 0x9d0110);
    if trainer.buffer.stored_steps() == 0 {
        bail!("checkpoint contains no replay data to roll out from");
    }
    let picks = trainer.buffer.sample_windows(windows, tau, &mut rng)?;
    let wb = WindowBatch::from_windows(&picks);
    let model = trainer
        .model
        .as_ref()
        .ok_or_else(|| anyhow!("rollout requires a model-enabled config"))?;
    let noise = FilterNoise::sample(&mut rng, tau + 1, wb.batch, &model.config);
    let tape = slac_core::Tape::new();
    let preds = model.generate_rollout(&tape, mode, &wb, &noise).map_err(|e| anyhow!("{e}"))?;
    let mode_name = match mode {
        RolloutMode::Posterior => "posterior",
        RolloutMode::ConditionalPrior => "conditional_prior",
        RolloutMode::Prior => "prior",
    };
    let obs_dim = wb.obs_dim;
    let mut records = Vec::new();
    for step in 0..=tau {
        for w in 0..wb.batch {
            records.push(RolloutRecord {
                mode: mode_name.to_string(),
                step,
                predicted_mean: preds[step][w * obs_dim..(w + 1) * obs_dim].to_vec(),
                ground_truth: wb.obs[step][w * obs_dim..(w + 1) * obs_dim].to_vec(),
            });
        }
    }
    Ok(records)
}

fn cmd_eval(
    config_path: &Path,
    checkpoint: &Path,
    episodes: usize,
    overrides: &[String],
) -> Result<()> {
    let config = load_config(config_path, overrides)?;
    let mut trainer = Trainer::new(config.train)?;
    trainer.restore_checkpoint(checkpoint)?;
    let stats = trainer.evaluate(episodes)?;
    println!(
        "{}",
        serde_json::json!({
            "episodes": episodes,
            "mean_return": stats.mean,
            "std_return": stats.std,
            "returns": stats.returns,
        })
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train { config, overrides, resume } => {
            cmd_train(config, overrides, *resume).map(|_| true)
        }
        Command::Verify { suite } => cmd_verify(suite),
        Command::Rollout { config, checkpoint, mode, out, windows, overrides } => {
            cmd_rollout(config, checkpoint, mode, out, *windows, overrides).map(|_| true)
        }
        Command::Eval { config, checkpoint, episodes, overrides } => {
            cmd_eval(config, checkpoint, *episodes, overrides).map(|_| true)
        }
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
