//! End-to-end training loop: pretraining on random data, interleaved
//! collection and gradient updates in the fixed order model -> critics ->
//! actor -> temperature -> EMA targets, periodic evaluation, and resumable
//! checkpoints.

use std::io::Write;
use std::path::PathBuf;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::actor_critic::{
    act, actor_loss, critic_loss, policy_noise, temperature_loss,
    CriticNets, HistoryBuffer, PolicyNet, RlBatch, Temperature,
};
use crate::autograd::{adam_step_group, Param, ParamGroup, Tape};
use crate::checkpoint::Checkpoint;
use crate::envs::{EnvConfig, Environment, TerminalKind};
use crate::latent_model::{FilterNoise, FilterOutput, ModelConfig, ModelNets, ModelVariant};
use crate::nn::Bind;
use crate::replay::{ReplayBuffer, WindowBatch};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticInput {
    /// Concatenated (z1, z2) filtered latent sample (default).
    Latent,
    /// Flattened observation-feature/action history (ablation).
    History,
    /// Raw current observation (fully observed baselines).
    State,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorInput {
    /// Flattened observation-feature/action history (default).
    History,
    /// Filtered latent sample (ablation).
    Latent,
    /// Raw current observation (fully observed baselines).
    State,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub total_env_steps: u64,
    #[serde(default = "default_one")]
    pub grad_steps_per_env_step: u32,
    pub pretrain_iters: u64,
    pub pretrain_random_steps: u64,
    /// Scale of the pre-tanh Gaussian used by the random exploration policy.
    #[serde(default = "default_one_f")]
    pub random_action_scale: f64,
    #[serde(default = "default_batch_model")]
    pub batch_size_model: usize,
    #[serde(default = "default_batch_rl")]
    pub batch_size_rl: usize,
    #[serde(default = "default_lr_model")]
    pub lr_model: f64,
    #[serde(default = "default_lr_rl")]
    pub lr_rl: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// EMA rate for the target critics.
    #[serde(default = "default_nu")]
    pub nu: f64,
    /// Sequence window length.
    #[serde(default = "default_tau")]
    pub tau: usize,
    #[serde(default = "default_sigma_sq")]
    pub sigma_sq: f64,
    #[serde(default = "default_latent1")]
    pub latent1_dim: usize,
    #[serde(default = "default_latent2")]
    pub latent2_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_width: usize,
    #[serde(default = "default_hidden")]
    pub feature_dim: usize,
    #[serde(default = "default_variant")]
    pub model_variant: ModelVariant,
    #[serde(default = "default_critic_input")]
    pub critic_input: CriticInput,
    #[serde(default = "default_actor_input")]
    pub actor_input: ActorInput,
    /// False runs the pure SAC baseline: no model, no model updates.
    #[serde(default = "default_true")]
    pub model_enabled: bool,
    #[serde(default = "default_true")]
    pub include_reward_head: bool,
    #[serde(default = "default_one_f")]
    pub policy_pre_scale: f64,
    /// Defaults to -action_dim.
    #[serde(default)]
    pub target_entropy: Option<f64>,
    #[serde(default = "default_alpha")]
    pub initial_alpha: f64,
    #[serde(default = "default_capacity")]
    pub replay_capacity: usize,
    /// Evaluation cadence in environment steps (0 = never).
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    /// Checkpoint cadence in environment steps (0 = never).
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Metrics cadence in iterations.
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    /// Restore the full-size network preset (latents 32+256, width 256,
    /// pretrain 50000).
    #[serde(default)]
    pub paper_preset: bool,
}

fn default_one() -> u32 {
    1
}
fn default_one_f() -> f64 {
    1.0
}
fn default_batch_model() -> usize {
    32
}
fn default_batch_rl() -> usize {
    256
}
fn default_lr_model() -> f64 {
    1e-4
}
fn default_lr_rl() -> f64 {
    3e-4
}
fn default_gamma() -> f64 {
    0.99
}
fn default_nu() -> f64 {
    0.005
}
fn default_tau() -> usize {
    8
}
fn default_sigma_sq() -> f64 {
    0.1
}
fn default_latent1() -> usize {
    8
}
fn default_latent2() -> usize {
    32
}
fn default_hidden() -> usize {
    64
}
fn default_variant() -> ModelVariant {
    ModelVariant::FactoredStochastic
}
fn default_critic_input() -> CriticInput {
    CriticInput::Latent
}
fn default_actor_input() -> ActorInput {
    ActorInput::History
}
fn default_true() -> bool {
    true
}
fn default_alpha() -> f64 {
    0.1
}
fn default_capacity() -> usize {
    100_000
}
fn default_eval_episodes() -> usize {
    10
}
fn default_log_every() -> u64 {
    100
}

impl TrainConfig {
    pub fn desk_default(env: EnvConfig) -> Self {
        TrainConfig {
            seed: 0,
            env,
            total_env_steps: 30_000,
            grad_steps_per_env_step: 1,
            pretrain_iters: 5_000,
            pretrain_random_steps: 1_000,
            random_action_scale: 1.0,
            batch_size_model: 32,
            batch_size_rl: 256,
            lr_model: 1e-4,
            lr_rl: 3e-4,
            gamma: 0.99,
            nu: 0.005,
            tau: 8,
            sigma_sq: 0.1,
            latent1_dim: 8,
            latent2_dim: 32,
            hidden_width: 64,
            feature_dim: 64,
            model_variant: ModelVariant::FactoredStochastic,
            critic_input: CriticInput::Latent,
            actor_input: ActorInput::History,
            model_enabled: true,
            include_reward_head: true,
            policy_pre_scale: 1.0,
            target_entropy: None,
            initial_alpha: 0.1,
            replay_capacity: 100_000,
            eval_every: 0,
            eval_episodes: 10,
            checkpoint_every: 0,
            log_every: 100,
            paper_preset: false,
        }
    }

    /// Pure SAC on the raw observation: no latent model.
    pub fn sac_state(env: EnvConfig) -> Self {
        TrainConfig {
            model_enabled: false,
            critic_input: CriticInput::State,
            actor_input: ActorInput::State,
            tau: 1,
            pretrain_iters: 0,
            ..Self::desk_default(env)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_model", self.lr_model),
            ("lr_rl", self.lr_rl),
            ("sigma_sq", self.sigma_sq),
            ("random_action_scale", self.random_action_scale),
            ("policy_pre_scale", self.policy_pre_scale),
            ("initial_alpha", self.initial_alpha),
        ];
        for (name, v) in positive {
            if v <= 0.0 {
                return Err(Error::Validation(format!("{name} must be positive, got {v}")));
            }
        }
        if self.tau < 1 {
            return Err(Error::Validation("tau must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Validation("gamma must lie in [0, 1)".into()));
        }
        if !(0.0 < self.nu && self.nu <= 1.0) {
            return Err(Error::Validation("nu must lie in (0, 1]".into()));
        }
        if self.batch_size_model == 0 || self.batch_size_rl == 0 || self.replay_capacity == 0 {
            return Err(Error::Validation("batch sizes and replay capacity must be positive".into()));
        }
        if self.latent1_dim >= self.latent2_dim && self.model_variant == ModelVariant::FactoredStochastic
        {
            return Err(Error::Validation(format!(
                "latent1_dim ({}) must be smaller than latent2_dim ({})",
                self.latent1_dim, self.latent2_dim
            )));
        }
        if !self.model_enabled {
            if self.critic_input != CriticInput::State || self.actor_input != ActorInput::State {
                return Err(Error::Validation(
                    "history/latent inputs need the model; set critic_input and actor_input to state"
                        .into(),
                ));
            }
            if self.pretrain_iters > 0 {
                return Err(Error::Validation(
                    "pretrain_iters > 0 requires the model to be enabled".into(),
                ));
            }
        }
        Ok(())
    }

    fn resolved(&self) -> TrainConfig {
        let mut cfg = self.clone();
        if cfg.paper_preset {
            cfg.latent1_dim = 32;
            cfg.latent2_dim = 256;
            cfg.hidden_width = 256;
            cfg.feature_dim = 256;
            cfg.pretrain_iters = 50_000;
        }
        cfg
    }
}

/// Update phases of one gradient step, in required order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Model,
    Critics,
    Actor,
    Temperature,
    TargetEma,
}

/// Instrumentation for the update-order invariants: the critic target must
/// see model parameters from after this step's model update and target
/// parameters from before this step's EMA update.
#[derive(Debug, Clone, Default)]
pub struct UpdateTrace {
    pub phases: Vec<Phase>,
    pub model_version_after_update: Option<u64>,
    pub model_version_at_rl_sample: Option<u64>,
    pub target_version_at_target: u64,
    pub target_version_before_ema: u64,
}

impl UpdateTrace {
    pub fn assert_order(&self, model_enabled: bool) {
        let expected: Vec<Phase> = if model_enabled {
            vec![Phase::Model, Phase::Critics, Phase::Actor, Phase::Temperature, Phase::TargetEma]
        } else {
            vec![Phase::Critics, Phase::Actor, Phase::Temperature, Phase::TargetEma]
        };
        assert_eq!(self.phases, expected, "gradient step ran out of order");
        if model_enabled {
            assert_eq!(
                self.model_version_at_rl_sample, self.model_version_after_update,
                "RL latents must be filtered with this step's updated model parameters"
            );
        }
        assert_eq!(
            self.target_version_at_target, self.target_version_before_ema,
            "critic target must use pre-EMA target parameters"
        );
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricRecord {
    pub kind: String,
    pub env_steps: u64,
    pub iteration: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub j_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub j_q1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub j_q2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub j_pi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub episode_return: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_std: Option<f64>,
}

impl MetricRecord {
    fn blank(kind: &str, env_steps: u64, iteration: u64) -> Self {
        MetricRecord {
            kind: kind.to_string(),
            env_steps,
            iteration,
            j_m: None,
            j_q1: None,
            j_q2: None,
            j_pi: None,
            alpha: None,
            episode_return: None,
            eval_mean: None,
            eval_std: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalStats {
    pub mean: f64,
    pub std: f64,
    pub returns: Vec<f64>,
}

/// Losses and bookkeeping from one gradient step.
#[derive(Debug, Clone, Default)]
pub struct StepMetrics {
    pub j_m: Option<f64>,
    pub j_q1: f64,
    pub j_q2: f64,
    pub j_pi: f64,
    pub alpha: f64,
    pub nan_skips: usize,
}

struct Rngs {
    env: ChaCha8Rng,
    act: ChaCha8Rng,
    replay: ChaCha8Rng,
    train: ChaCha8Rng,
    eval: ChaCha8Rng,
    explore: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Rngs {
    fn new(seed: u64) -> Self {
        Rngs {
            env: stream(seed, 1),
            act: stream(seed, 2),
            replay: stream(seed, 3),
            train: stream(seed, 4),
            eval: stream(seed, 5),
            explore: stream(seed, 6),
        }
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub env: Box<dyn Environment>,
    pub model: Option<ModelNets>,
    pub policy: PolicyNet,
    pub critics: CriticNets,
    pub temperature: Temperature,
    pub buffer: ReplayBuffer,
    pub history: HistoryBuffer,
    rngs: Rngs,
    pub env_steps: u64,
    pub iteration: u64,
    pub metrics: Vec<MetricRecord>,
    pub last_trace: UpdateTrace,
    pub out_dir: Option<PathBuf>,
    /// Injected fault for exercising the NaN-abort path in tests.
    pub test_force_nan_at: Option<u64>,
    model_group: ParamGroup,
    critic_group: ParamGroup,
    policy_group: ParamGroup,
    temp_group: ParamGroup,
    current_obs: Vec<f64>,
    episode_return: f64,
    last_eval_at: u64,
    last_checkpoint_at: u64,
    nan_incidents: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let config = config.resolved();
        let mut env = config.env.build()?;
        let spec = env.spec().clone();
        let mut init_rng = stream(config.seed, 0);

        let model = if config.model_enabled {
            let mc = ModelConfig {
                variant: config.model_variant,
                obs_dim: spec.obs_dim,
                image_obs: config.env.image_obs,
                action_dim: spec.action_dim,
                latent1_dim: config.latent1_dim,
                latent2_dim: config.latent2_dim,
                hidden_width: config.hidden_width,
                hidden_layers: 2,
                feature_dim: config.feature_dim,
                sigma_sq: config.sigma_sq,
                include_reward: config.include_reward_head,
            };
            Some(ModelNets::new(&mut init_rng, mc))
        } else {
            None
        };

        let history_dim =
            (config.tau + 1) * config.feature_dim + config.tau * spec.action_dim;
        let latent_total = config.latent1_dim + config.latent2_dim;
        let critic_in = match config.critic_input {
            CriticInput::Latent => latent_total,
            CriticInput::History => history_dim,
            CriticInput::State => spec.obs_dim,
        };
        let policy_in = match config.actor_input {
            ActorInput::History => history_dim,
            ActorInput::Latent => latent_total,
            ActorInput::State => spec.obs_dim,
        };
        let hidden = vec![config.hidden_width, config.hidden_width];
        let critics = CriticNets::new(&mut init_rng, critic_in, spec.action_dim, &hidden);
        let policy = PolicyNet::new(
            &mut init_rng,
            policy_in,
            spec.action_dim,
            &hidden,
            config.policy_pre_scale,
        );
        let target_entropy =
            config.target_entropy.unwrap_or(-(spec.action_dim as f64));
        let temperature = Temperature::new(config.initial_alpha, target_entropy);

        let buffer = ReplayBuffer::new(config.replay_capacity, spec.obs_dim, spec.action_dim);
        let history = HistoryBuffer::new(config.tau, spec.action_dim);

        let model_group = model.as_ref().map(|m| m.params()).unwrap_or_default();
        let critic_group = critics.params();
        let policy_group = policy.params();
        let temp_group = temperature.params();

        let mut rngs = Rngs::new(config.seed);
        let first_obs = env.reset(&mut rngs.env);
        let mut trainer = Trainer {
            config,
            env,
            model,
            policy,
            critics,
            temperature,
            buffer,
            history,
            rngs,
            env_steps: 0,
            iteration: 0,
            metrics: Vec::new(),
            last_trace: UpdateTrace::default(),
            out_dir: None,
            test_force_nan_at: None,
            model_group,
            critic_group,
            policy_group,
            temp_group,
            current_obs: first_obs.clone(),
            episode_return: 0.0,
            last_eval_at: 0,
            last_checkpoint_at: 0,
            nan_incidents: 0,
        };
        trainer.buffer.begin_episode(first_obs.clone());
        trainer.history.reset(first_obs);
        Ok(trainer)
    }

    pub fn action_dim(&self) -> usize {
        self.env.spec().action_dim
    }

    /// Assemble the policy input row for the live history buffer.
    fn policy_input_row(&self) -> Vec<f64> {
        self.policy_input_row_for(&self.history)
    }

    /// One environment interaction with the current policy (or the random
    /// exploration policy during pretraining).
    pub fn collect_step(&mut self, random_policy: bool) -> Result<()> {
        let adim = self.action_dim();
        let action = if random_policy {
            let s = self.config.random_action_scale;
            (0..adim)
                .map(|_| (s * self.rngs.explore.sample::<f64, _>(StandardNormal)).tanh())
                .collect::<Vec<f64>>()
        } else {
            let row = self.policy_input_row();
            let noise = policy_noise(&mut self.rngs.act, 1, adim);
            act(&self.policy, &row, true, &noise)
        };
        let out = self.env.step(&action, &mut self.rngs.env)?;
        self.episode_return += out.reward;
        self.env_steps += self.env.spec().action_repeat as u64;
        self.buffer.append_step(
            action.clone(),
            out.reward,
            out.obs.clone(),
            out.terminal.is_terminal(),
            out.terminal == TerminalKind::Failure,
        )?;
        self.history.push(action, out.obs.clone());
        self.current_obs = out.obs;

        if out.terminal.is_terminal() {
            let mut record =
                MetricRecord::blank("episode", self.env_steps, self.iteration);
            record.episode_return = Some(self.episode_return);
            self.push_metric(record)?;
            self.episode_return = 0.0;
            let first = self.env.reset(&mut self.rngs.env);
            self.buffer.begin_episode(first.clone());
            self.history.reset(first.clone());
            self.current_obs = first;
        }
        Ok(())
    }

    /// Build the RL batch from freshly sampled windows, filtering latents
    /// with the current (post-model-update) parameters.
    fn build_rl_batch(&mut self, wb: &WindowBatch) -> Result<(RlBatch, Option<u64>)> {
        let tau = wb.tau;
        let needs_filter = matches!(self.config.critic_input, CriticInput::Latent | CriticInput::History)
            || matches!(self.config.actor_input, ActorInput::Latent | ActorInput::History);
        let mut model_version = None;

        let tape = Tape::new();
        let filter: Option<FilterOutput> = if needs_filter {
            let model = self.model.as_ref().ok_or_else(|| {
                Error::Validation("latent/history inputs require the model".into())
            })?;
            let noise =
                FilterNoise::sample(&mut self.rngs.train, tau + 1, wb.batch, &model.config);
            model_version = Some(self.model_group.version());
            Some(model.infer_filter(&tape, wb, &noise, Bind::Frozen)?)
        } else {
            None
        };

        // Flattened history input up to observation slot `upto`: features
        // (front-padded to tau+1 by repeating the first slot) followed by the
        // matching actions (zero-padded), per batch element. Matches the
        // acting-time HistoryBuffer convention.
        let history_row = |filter: &FilterOutput, upto: usize| -> Vec<f64> {
            let b = wb.batch;
            let f = self.config.feature_dim;
            let pad = tau - upto;
            let feat_vals: Vec<Vec<f64>> = (0..=tau)
                .map(|slot| filter.features[slot.saturating_sub(pad)].value())
                .collect();
            let action_vals: Vec<Vec<f64>> = (0..tau)
                .map(|slot| {
                    if slot < pad {
                        vec![0.0; b * wb.action_dim]
                    } else {
                        wb.actions[slot - pad].clone()
                    }
                })
                .collect();
            let stride = (tau + 1) * f + tau * wb.action_dim;
            let mut row = vec![0.0; b * stride];
            for i in 0..b {
                let mut k = 0;
                for fv in &feat_vals {
                    row[i * stride + k..i * stride + k + f].copy_from_slice(&fv[i * f..(i + 1) * f]);
                    k += f;
                }
                for av in &action_vals {
                    row[i * stride + k..i * stride + k + wb.action_dim]
                        .copy_from_slice(&av[i * wb.action_dim..(i + 1) * wb.action_dim]);
                    k += wb.action_dim;
                }
            }
            row
        };

        let latent_row = |filter: &FilterOutput, t: usize| -> Vec<f64> {
            filter.latents[t].full(&tape).value()
        };

        let (critic_prev, critic_next, critic_in_dim) = match self.config.critic_input {
            CriticInput::Latent => {
                let f = filter.as_ref().expect("latent critic input");
                (
                    latent_row(f, tau - 1),
                    latent_row(f, tau),
                    self.config.latent1_dim + self.config.latent2_dim,
                )
            }
            CriticInput::History => {
                let f = filter.as_ref().expect("history critic input");
                let dim = (tau + 1) * self.config.feature_dim + tau * wb.action_dim;
                (history_row(f, tau - 1), history_row(f, tau), dim)
            }
            CriticInput::State => {
                (wb.obs[tau - 1].clone(), wb.obs[tau].clone(), wb.obs_dim)
            }
        };
        let (policy_next, policy_in_dim) = match self.config.actor_input {
            ActorInput::History => {
                let f = filter.as_ref().expect("history actor input");
                let dim = (tau + 1) * self.config.feature_dim + tau * wb.action_dim;
                (history_row(f, tau), dim)
            }
            ActorInput::Latent => {
                let f = filter.as_ref().expect("latent actor input");
                (
                    latent_row(f, tau),
                    self.config.latent1_dim + self.config.latent2_dim,
                )
            }
            ActorInput::State => (wb.obs[tau].clone(), wb.obs_dim),
        };

        Ok((
            RlBatch {
                batch: wb.batch,
                window_ids: wb.window_ids.clone(),
                critic_in_prev: critic_prev,
                critic_in_next: critic_next,
                policy_in_next: policy_next,
                action_last: wb.actions[tau - 1].clone(),
                reward_last: wb.rewards[tau - 1].clone(),
                bootstrap_mask: wb.bootstrap_mask.clone(),
                critic_in_dim,
                policy_in_dim,
                action_dim: wb.action_dim,
            },
            model_version,
        ))
    }

    /// One model-only update (the pretraining step). Returns J_M.
    fn model_update(&mut self) -> Result<f64> {
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| Error::Validation("model update without a model".into()))?;
        let windows = self.buffer.sample_windows(
            self.config.batch_size_model,
            self.config.tau,
            &mut self.rngs.replay,
        )?;
        let wb = WindowBatch::from_windows(&windows);
        let noise = FilterNoise::sample(
            &mut self.rngs.train,
            self.config.tau + 1,
            wb.batch,
            &model.config,
        );
        let tape = Tape::new();
        let filter = model.infer_filter(&tape, &wb, &noise, Bind::Trainable)?;
        let loss = model.model_loss(&tape, &wb, &filter)?;
        let mut j_m = loss.total.scalar();
        if self.test_force_nan_at == Some(self.iteration) {
            j_m = f64::NAN;
        }
        if !j_m.is_finite() {
            return self.abort_with_diagnostic("model loss is not finite");
        }
        tape.backward(&loss.total)?;
        let params: Vec<Param> = self.model_group.iter().cloned().collect();
        let outcome = adam_step_group(&tape, &params, self.config.lr_model);
        self.nan_incidents += outcome.skipped_nan as u64;
        if outcome.skipped_nan > 0 {
            eprintln!(
                "adam: skipped {} parameter updates with NaN gradients at iteration {}",
                outcome.skipped_nan, self.iteration
            );
        }
        Ok(j_m)
    }

    fn abort_with_diagnostic<T>(&self, why: &str) -> Result<T> {
        if let Some(dir) = &self.out_dir {
            let path = dir.join("diagnostic.ckpt");
            let _ = self.save_checkpoint(&path);
            return Err(Error::Numeric(format!(
                "{why}; diagnostic checkpoint written to {}",
                path.display()
            )));
        }
        Err(Error::Numeric(format!("{why}; no output directory for a diagnostic checkpoint")))
    }

    /// One full gradient step in the required order:
    /// model -> critics -> actor -> temperature -> EMA targets.
    pub fn gradient_step(&mut self) -> Result<StepMetrics> {
        let mut trace = UpdateTrace::default();
        let mut metrics = StepMetrics::default();

        if self.config.model_enabled {
            metrics.j_m = Some(self.model_update()?);
            trace.phases.push(Phase::Model);
            trace.model_version_after_update = Some(self.model_group.version());
        }

        let windows = self.buffer.sample_windows(
            self.config.batch_size_rl,
            self.config.tau,
            &mut self.rngs.replay,
        )?;
        let wb = WindowBatch::from_windows(&windows);
        let (rl, model_version) = self.build_rl_batch(&wb)?;
        trace.model_version_at_rl_sample = model_version;

        // Critics.
        trace.target_version_at_target = self.critics.target_params().version();
        let target_noise = policy_noise(&mut self.rngs.train, rl.batch, rl.action_dim);
        let tape = Tape::new();
        let out = critic_loss(
            &tape,
            &self.critics,
            &self.policy,
            &self.temperature,
            &rl,
            &wb.window_ids,
            self.config.gamma,
            &target_noise,
        )?;
        metrics.j_q1 = out.j_q1.scalar();
        metrics.j_q2 = out.j_q2.scalar();
        if !metrics.j_q1.is_finite() || !metrics.j_q2.is_finite() {
            return self.abort_with_diagnostic("critic loss is not finite");
        }
        tape.backward(&(out.j_q1 + out.j_q2))?;
        let params: Vec<Param> = self.critic_group.iter().cloned().collect();
        let outcome = adam_step_group(&tape, &params, self.config.lr_rl);
        metrics.nan_skips += outcome.skipped_nan;
        trace.phases.push(Phase::Critics);

        // Actor.
        let actor_noise = policy_noise(&mut self.rngs.train, rl.batch, rl.action_dim);
        let tape = Tape::new();
        let aout = actor_loss(&tape, &self.policy, &self.critics, &self.temperature, &rl, &actor_noise)?;
        metrics.j_pi = aout.loss.scalar();
        if !metrics.j_pi.is_finite() {
            return self.abort_with_diagnostic("actor loss is not finite");
        }
        tape.backward(&aout.loss)?;
        let params: Vec<Param> = self.policy_group.iter().cloned().collect();
        let outcome = adam_step_group(&tape, &params, self.config.lr_rl);
        metrics.nan_skips += outcome.skipped_nan;
        trace.phases.push(Phase::Actor);

        // Temperature.
        let tape = Tape::new();
        let tloss = temperature_loss(&tape, &self.temperature, &aout.log_probs);
        tape.backward(&tloss)?;
        let params: Vec<Param> = self.temp_group.iter().cloned().collect();
        adam_step_group(&tape, &params, self.config.lr_rl);
        metrics.alpha = self.temperature.alpha();
        trace.phases.push(Phase::Temperature);

        // EMA targets.
        trace.target_version_before_ema = self.critics.target_params().version();
        self.critics.target_update(self.config.nu);
        trace.phases.push(Phase::TargetEma);

        trace.assert_order(self.config.model_enabled);
        self.nan_incidents += metrics.nan_skips as u64;
        self.last_trace = trace;
        Ok(metrics)
    }

    /// Collect random data, then run model-only updates.
    pub fn pretrain(&mut self) -> Result<()> {
        if self.buffer.stored_steps() > 0 {
            return Err(Error::Validation("pretrain requires an empty replay buffer".into()));
        }
        while self.env_steps < self.config.pretrain_random_steps {
            self.collect_step(true)?;
        }
        for i in 0..self.config.pretrain_iters {
            let j_m = self.model_update()?;
            if i % self.config.log_every == 0 {
                let mut record = MetricRecord::blank("pretrain", self.env_steps, i);
                record.j_m = Some(j_m);
                self.push_metric(record)?;
            }
        }
        Ok(())
    }

    /// The interleaved collect/update loop, from the current state to the
    /// configured total step budget.
    pub fn train_loop(&mut self) -> Result<()> {
        while self.env_steps < self.config.total_env_steps {
            self.collect_step(false)?;
            for _ in 0..self.config.grad_steps_per_env_step {
                let metrics = self.gradient_step()?;
                if self.iteration % self.config.log_every == 0 {
                    let mut record = MetricRecord::blank("train", self.env_steps, self.iteration);
                    record.j_m = metrics.j_m;
                    record.j_q1 = Some(metrics.j_q1);
                    record.j_q2 = Some(metrics.j_q2);
                    record.j_pi = Some(metrics.j_pi);
                    record.alpha = Some(metrics.alpha);
                    self.push_metric(record)?;
                }
            }
            self.iteration += 1;

            if self.config.eval_every > 0
                && self.env_steps - self.last_eval_at >= self.config.eval_every
            {
                self.last_eval_at = self.env_steps;
                let stats = self.evaluate(self.config.eval_episodes)?;
                let mut record = MetricRecord::blank("eval", self.env_steps, self.iteration);
                record.eval_mean = Some(stats.mean);
                record.eval_std = Some(stats.std);
                self.push_metric(record)?;
            }
            if self.config.checkpoint_every > 0
                && self.env_steps - self.last_checkpoint_at >= self.config.checkpoint_every
            {
                self.last_checkpoint_at = self.env_steps;
                if let Some(dir) = self.out_dir.clone() {
                    self.save_checkpoint(&dir.join("latest.ckpt"))?;
                }
            }
        }
        if let Some(dir) = self.out_dir.clone() {
            self.save_checkpoint(&dir.join("final.ckpt"))?;
        }
        Ok(())
    }

    /// Run `pretrain` then `train_loop`.
    pub fn run(&mut self) -> Result<()> {
        self.pretrain()?;
        self.train_loop()
    }

    /// Evaluation episodes with the stochastic policy on a fresh environment
    /// instance; never touches the replay buffer.
    pub fn evaluate(&mut self, episodes: usize) -> Result<EvalStats> {
        self.evaluate_with(episodes, true)
    }

    /// Deterministic (squashed-mean) evaluation is a diagnostic mode only.
    pub fn evaluate_with(&mut self, episodes: usize, stochastic: bool) -> Result<EvalStats> {
        let mut env = self.config.env.build()?;
        let adim = env.spec().action_dim;
        let mut history = HistoryBuffer::new(self.config.tau, adim);
        let mut returns = Vec::with_capacity(episodes);
        for _ in 0..episodes {
            let obs = env.reset(&mut self.rngs.eval);
            history.reset(obs);
            let mut total = 0.0;
            loop {
                let row = self.policy_input_row_for(&history);
                let noise = policy_noise(&mut self.rngs.eval, 1, adim);
                let action = act(&self.policy, &row, stochastic, &noise);
                let out = env.step(&action, &mut self.rngs.eval)?;
                total += out.reward;
                history.push(action, out.obs);
                if out.terminal.is_terminal() {
                    break;
                }
            }
            returns.push(total);
        }
        Ok(stats_of(returns))
    }

    fn policy_input_row_for(&self, history: &HistoryBuffer) -> Vec<f64> {
        match self.config.actor_input {
            ActorInput::State => history.last_obs().to_vec(),
            ActorInput::History => {
                let model = self.model.as_ref().expect("history input requires the model");
                let tape = Tape::new();
                let obs_rows: Vec<f64> =
                    history.obs_slots().flat_map(|o| o.iter().copied()).collect();
                let n = self.config.tau + 1;
                let x = tape.leaf(obs_rows, &[n, self.env.spec().obs_dim]);
                let feats = model.encoder.forward(&tape, &x, Bind::Frozen).value();
                let mut row = feats;
                for a in history.action_slots() {
                    row.extend_from_slice(a);
                }
                row
            }
            ActorInput::Latent => {
                let model = self.model.as_ref().expect("latent input requires the model");
                let w = crate::replay::SequenceWindow {
                    obs: history.obs_slots().cloned().collect(),
                    actions: history.action_slots().cloned().collect(),
                    rewards: vec![0.0; self.config.tau],
                    valid_mask: vec![true; self.config.tau + 1],
                    terminal: false,
                    failure: false,
                    window_id: u64::MAX,
                };
                let batch = WindowBatch::from_windows(&[w]);
                let noise = FilterNoise::zeros(self.config.tau + 1, 1, &model.config);
                let tape = Tape::new();
                let filter = model
                    .infer_filter(&tape, &batch, &noise, Bind::Frozen)
                    .expect("history filtering");
                filter.latents[self.config.tau].full(&tape).value()
            }
        }
    }

    /// Bit-exact snapshot of every parameter (determinism checks).
    pub fn param_bits(&self) -> Vec<u64> {
        let mut bits = Vec::new();
        for group in self.all_param_groups() {
            for p in group.iter() {
                bits.extend(p.value().iter().map(|v| v.to_bits()));
            }
        }
        for p in self.target_group().iter() {
            bits.extend(p.value().iter().map(|v| v.to_bits()));
        }
        bits
    }

    fn push_metric(&mut self, record: MetricRecord) -> Result<()> {
        if let Some(last) = self.metrics.last() {
            debug_assert!(record.env_steps >= last.env_steps, "metrics must be monotone");
        }
        if let Some(dir) = &self.out_dir {
            let path = dir.join("metrics.jsonl");
            let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
            let line = serde_json::to_string(&record)
                .map_err(|e| Error::Validation(format!("metrics serialization: {e}")))?;
            writeln!(file, "{line}")?;
        }
        self.metrics.push(record);
        Ok(())
    }

    fn all_param_groups(&self) -> Vec<&ParamGroup> {
        let mut groups = vec![&self.critic_group, &self.policy_group, &self.temp_group];
        if !self.model_group.is_empty() {
            groups.push(&self.model_group);
        }
        groups
    }

    fn target_group(&self) -> ParamGroup {
        self.critics.target_params()
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        let mut ck = Checkpoint::new();
        for group in self.all_param_groups() {
            ck.insert_group(group);
        }
        ck.insert_group(&self.target_group());

        ck.insert("trainer/env_steps", vec![1], vec![self.env_steps as f64]);
        ck.insert("trainer/iteration", vec![1], vec![self.iteration as f64]);
        ck.insert("trainer/last_eval_at", vec![1], vec![self.last_eval_at as f64]);
        ck.insert(
            "trainer/last_checkpoint_at",
            vec![1],
            vec![self.last_checkpoint_at as f64],
        );
        ck.insert("trainer/nan_incidents", vec![1], vec![self.nan_incidents as f64]);
        ck.insert("trainer/episode_return", vec![1], vec![self.episode_return]);
        ck.insert("trainer/current_obs", vec![self.current_obs.len()], self.current_obs.clone());
        let env_state = self.env.state_vec();
        ck.insert("trainer/env_state", vec![env_state.len()], env_state);

        for (name, rng) in [
            ("env", &self.rngs.env),
            ("act", &self.rngs.act),
            ("replay", &self.rngs.replay),
            ("train", &self.rngs.train),
            ("eval", &self.rngs.eval),
            ("explore", &self.rngs.explore),
        ] {
            ck.insert(format!("rng/{name}"), vec![4], word_pos_to_f64(rng.get_word_pos()));
        }

        // History buffer (obs slots then action slots).
        let hist_obs: Vec<f64> = self.history.obs_slots().flat_map(|o| o.iter().copied()).collect();
        let hist_act: Vec<f64> =
            self.history.action_slots().flat_map(|a| a.iter().copied()).collect();
        ck.insert("trainer/history_obs", vec![hist_obs.len()], hist_obs);
        ck.insert("trainer/history_act", vec![hist_act.len()], hist_act);

        // Replay dump for resumable runs.
        ck.insert("replay/episodes", vec![1], vec![self.buffer.num_episodes() as f64]);
        for (i, ep) in self.buffer.episodes().enumerate() {
            let obs: Vec<f64> = ep.observations.iter().flat_map(|o| o.iter().copied()).collect();
            let act: Vec<f64> = ep.actions.iter().flat_map(|a| a.iter().copied()).collect();
            ck.insert(format!("replay/e{i}/obs"), vec![obs.len()], obs);
            ck.insert(format!("replay/e{i}/act"), vec![act.len()], act);
            ck.insert(format!("replay/e{i}/rew"), vec![ep.rewards.len()], ep.rewards.clone());
            ck.insert(
                format!("replay/e{i}/flags"),
                vec![2],
                vec![ep.terminal as u8 as f64, ep.failure as u8 as f64],
            );
        }
        ck.save(path)
    }

    pub fn restore_checkpoint(&mut self, path: &std::path::Path) -> Result<()> {
        let ck = Checkpoint::load(path)?;
        for group in self.all_param_groups() {
            ck.restore_group(group)?;
        }
        ck.restore_group(&self.target_group())?;

        self.env_steps = ck.require("trainer/env_steps")?[0] as u64;
        self.iteration = ck.require("trainer/iteration")?[0] as u64;
        self.last_eval_at = ck.require("trainer/last_eval_at")?[0] as u64;
        self.last_checkpoint_at = ck.require("trainer/last_checkpoint_at")?[0] as u64;
        self.nan_incidents = ck.require("trainer/nan_incidents")?[0] as u64;
        self.episode_return = ck.require("trainer/episode_return")?[0];
        self.current_obs = ck.require("trainer/current_obs")?.to_vec();
        self.env.restore_state(ck.require("trainer/env_state")?);

        for (name, rng) in [
            ("env", &mut self.rngs.env),
            ("act", &mut self.rngs.act),
            ("replay", &mut self.rngs.replay),
            ("train", &mut self.rngs.train),
            ("eval", &mut self.rngs.eval),
            ("explore", &mut self.rngs.explore),
        ] {
            let words = ck.require(&format!("rng/{name}"))?;
            rng.set_word_pos(f64_to_word_pos(words));
        }

        // History.
        let spec = self.env.spec().clone();
        let hist_obs = ck.require("trainer/history_obs")?;
        let hist_act = ck.require("trainer/history_act")?;
        self.history.reset(vec![0.0; spec.obs_dim]);
        let obs_rows: Vec<Vec<f64>> =
            hist_obs.chunks(spec.obs_dim).map(|c| c.to_vec()).collect();
        let act_rows: Vec<Vec<f64>> =
            hist_act.chunks(spec.action_dim).map(|c| c.to_vec()).collect();
        self.history.restore(obs_rows, act_rows);

        // Replay.
        let episodes = ck.require("replay/episodes")?[0] as usize;
        self.buffer = ReplayBuffer::new(self.config.replay_capacity, spec.obs_dim, spec.action_dim);
        for i in 0..episodes {
            let obs = ck.require(&format!("replay/e{i}/obs"))?;
            let act = ck.require(&format!("replay/e{i}/act"))?;
            let rew = ck.require(&format!("replay/e{i}/rew"))?;
            let flags = ck.require(&format!("replay/e{i}/flags"))?;
            let obs_rows: Vec<Vec<f64>> = obs.chunks(spec.obs_dim).map(|c| c.to_vec()).collect();
            self.buffer.begin_episode(obs_rows[0].clone());
            let n = rew.len();
            for t in 0..n {
                self.buffer.append_step(
                    act[t * spec.action_dim..(t + 1) * spec.action_dim].to_vec(),
                    rew[t],
                    obs_rows[t + 1].clone(),
                    t + 1 == n && flags[0] != 0.0,
                    t + 1 == n && flags[1] != 0.0,
                )?;
            }
        }
        Ok(())
    }
}

fn word_pos_to_f64(pos: u128) -> Vec<f64> {
    (0..4).map(|i| ((pos >> (32 * i)) & 0xFFFF_FFFF) as f64).collect()
}

fn f64_to_word_pos(words: &[f64]) -> u128 {
    words
        .iter()
        .enumerate()
        .fold(0u128, |acc, (i, w)| acc | ((*w as u128) << (32 * i)))
}

pub fn stats_of(returns: Vec<f64>) -> EvalStats {
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    EvalStats { mean, std: var.sqrt(), returns }
}

/// Mean return of the random exploration policy (tanh of a scaled Gaussian),
/// measured by rollout. The SAC-mode acceptance threshold is expressed
/// against this baseline.
pub fn random_policy_baseline(
    env_cfg: &EnvConfig,
    episodes: usize,
    seed: u64,
    action_scale: f64,
) -> Result<EvalStats> {
    let mut env = env_cfg.build()?;
    let mut rng = stream(seed, 7);
    let adim = env.spec().action_dim;
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        env.reset(&mut rng);
        let mut total = 0.0;
        loop {
            let action: Vec<f64> = (0..adim)
                .map(|_| (action_scale * rng.sample::<f64, _>(StandardNormal)).tanh())
                .collect();
            let out = env.step(&action, &mut rng)?;
            total += out.reward;
            if out.terminal.is_terminal() {
                break;
            }
        }
        returns.push(total);
    }
    Ok(stats_of(returns))
}
