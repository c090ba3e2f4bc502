//! Control half: twin soft Q-functions on latent samples, a history-
//! conditioned tanh-Gaussian policy, automatic temperature tuning, and EMA
//! target networks.
//!
//! Bellman targets are gradient-detached; the soft value uses the minimum of
//! the two target critics at a fresh policy sample.

use std::collections::VecDeque;

use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Param, ParamGroup, Tape, Tensor};
use crate::distributions::TanhDiagGaussian;
use crate::nn::{Bind, GaussianNet, Mlp};
use crate::{Error, Result};

/// Twin Q-networks with EMA target copies. Target parameters are only ever
/// written by `target_update`, never by the optimizer.
pub struct CriticNets {
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub input_dim: usize,
    pub action_dim: usize,
}

impl CriticNets {
    pub fn new(
        rng: &mut ChaCha8Rng,
        input_dim: usize,
        action_dim: usize,
        hidden: &[usize],
    ) -> Self {
        let q1 = Mlp::new(rng, "critic/q1", input_dim + action_dim, hidden, 1);
        let q2 = Mlp::new(rng, "critic/q2", input_dim + action_dim, hidden, 1);
        let q1_target = Mlp::new(rng, "critic/q1_target", input_dim + action_dim, hidden, 1);
        let q2_target = Mlp::new(rng, "critic/q2_target", input_dim + action_dim, hidden, 1);
        let nets = CriticNets { q1, q2, q1_target, q2_target, input_dim, action_dim };
        nets.hard_sync();
        nets
    }

    /// theta_bar <- theta, both critics.
    pub fn hard_sync(&self) {
        self.target_update(1.0);
    }

    /// theta_bar <- nu * theta + (1 - nu) * theta_bar, elementwise.
    pub fn target_update(&self, nu: f64) {
        assert!(nu > 0.0 && nu <= 1.0, "target_update: nu must lie in (0, 1]");
        for (live, target) in [(&self.q1, &self.q1_target), (&self.q2, &self.q2_target)] {
            let mut lg = ParamGroup::new();
            live.params(&mut lg);
            let mut tg = ParamGroup::new();
            target.params(&mut tg);
            for (l, t) in lg.iter().zip(tg.iter()) {
                t.ema_from(l, nu);
            }
        }
    }

    pub fn params(&self) -> ParamGroup {
        let mut g = ParamGroup::new();
        self.q1.params(&mut g);
        self.q2.params(&mut g);
        g
    }

    pub fn target_params(&self) -> ParamGroup {
        let mut g = ParamGroup::new();
        self.q1_target.params(&mut g);
        self.q2_target.params(&mut g);
        g
    }

    fn q(&self, tape: &Tape, net: &Mlp, input: &Tensor, action: &Tensor, mode: Bind) -> Tensor {
        let x = tape.concat(&[input, action], 1);
        net.forward(tape, &x, mode)
    }
}

/// History-conditioned policy: flattened fixed window of observation features
/// and past actions, MLP trunk, tanh-Gaussian head.
pub struct PolicyNet {
    pub net: GaussianNet,
    pub input_dim: usize,
    pub action_dim: usize,
    /// Multiplier on the pre-squash std (the x2 variant helps some tasks).
    pub pre_scale: f64,
}

impl PolicyNet {
    pub fn new(
        rng: &mut ChaCha8Rng,
        input_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        pre_scale: f64,
    ) -> Self {
        PolicyNet {
            net: GaussianNet::new(rng, "policy", input_dim, hidden, action_dim),
            input_dim,
            action_dim,
            pre_scale,
        }
    }

    pub fn params(&self) -> ParamGroup {
        let mut g = ParamGroup::new();
        self.net.params(&mut g);
        g
    }

    pub fn dist(&self, tape: &Tape, input: &Tensor, mode: Bind) -> TanhDiagGaussian {
        TanhDiagGaussian::new(self.net.forward_scaled(tape, input, mode, self.pre_scale))
    }
}

/// Entropy temperature alpha = exp(log_alpha) with its tuning target.
pub struct Temperature {
    pub log_alpha: Param,
    pub target_entropy: f64,
}

impl Temperature {
    pub fn new(initial_alpha: f64, target_entropy: f64) -> Self {
        assert!(initial_alpha > 0.0);
        Temperature {
            log_alpha: Param::new("temperature/log_alpha", vec![1], vec![initial_alpha.ln()]),
            target_entropy,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.value()[0].exp()
    }

    pub fn params(&self) -> ParamGroup {
        let mut g = ParamGroup::new();
        g.push(self.log_alpha.clone());
        g
    }
}

/// Rolling observation/action history, padded at episode start with the first
/// observation repeated and zero actions — the same convention the replay
/// windows use, so acting and training see identical input distributions.
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    pub tau: usize,
    obs: VecDeque<Vec<f64>>,
    actions: VecDeque<Vec<f64>>,
    action_dim: usize,
}

impl HistoryBuffer {
    pub fn new(tau: usize, action_dim: usize) -> Self {
        HistoryBuffer { tau, obs: VecDeque::new(), actions: VecDeque::new(), action_dim }
    }

    pub fn reset(&mut self, first_obs: Vec<f64>) {
        self.obs.clear();
        self.actions.clear();
        for _ in 0..=self.tau {
            self.obs.push_back(first_obs.clone());
        }
        for _ in 0..self.tau {
            self.actions.push_back(vec![0.0; self.action_dim]);
        }
    }

    pub fn push(&mut self, action: Vec<f64>, obs: Vec<f64>) {
        self.obs.pop_front();
        self.obs.push_back(obs);
        self.actions.pop_front();
        self.actions.push_back(action);
    }

    pub fn obs_slots(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.obs.iter()
    }

    pub fn action_slots(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.actions.iter()
    }

    /// Most recent observation.
    pub fn last_obs(&self) -> &[f64] {
        self.obs.back().expect("reset before use")
    }

    /// Overwrite the whole buffer (checkpoint restore).
    pub fn restore(&mut self, obs: Vec<Vec<f64>>, actions: Vec<Vec<f64>>) {
        assert_eq!(obs.len(), self.tau + 1, "restore: need tau+1 observation slots");
        assert_eq!(actions.len(), self.tau, "restore: need tau action slots");
        self.obs = obs.into();
        self.actions = actions.into();
    }
}

/// Draw an action for one history row. Stochastic sampling is the default for
/// both behavior and evaluation; the squashed mean is a diagnostic mode.
pub fn act(policy: &PolicyNet, input_row: &[f64], stochastic: bool, noise: &[f64]) -> Vec<f64> {
    assert_eq!(input_row.len(), policy.input_dim, "act: input dim mismatch");
    let tape = Tape::new();
    let input = tape.leaf(input_row.to_vec(), &[1, policy.input_dim]);
    let dist = policy.dist(&tape, &input, Bind::Frozen);
    if stochastic {
        let (action, _, _) = dist.rsample_with_log_prob(noise);
        action.value()
    } else {
        dist.mean_action().value()
    }
}

/// One RL batch: detached latents (or raw inputs, per configuration) for the
/// critics plus the assembled policy history input.
#[derive(Debug, Clone)]
pub struct RlBatch {
    pub batch: usize,
    pub window_ids: Vec<u64>,
    /// Critic input at the second-to-last step, `[batch * critic_in_dim]`.
    pub critic_in_prev: Vec<f64>,
    /// Critic input at the last step.
    pub critic_in_next: Vec<f64>,
    /// Policy history input through the last step, `[batch * policy_in_dim]`.
    pub policy_in_next: Vec<f64>,
    /// a_tau, `[batch * action_dim]`.
    pub action_last: Vec<f64>,
    /// r_tau, `[batch]`.
    pub reward_last: Vec<f64>,
    /// 0.0 where the final transition blocks bootstrapping.
    pub bootstrap_mask: Vec<f64>,
    pub critic_in_dim: usize,
    pub policy_in_dim: usize,
    pub action_dim: usize,
}

#[derive(Debug)]
pub struct CriticLossOut {
    pub j_q1: Tensor,
    pub j_q2: Tensor,
    /// Detached Bellman targets, `[batch]`.
    pub targets: Vec<f64>,
    /// min(Q1_bar, Q2_bar) at the fresh policy sample, `[batch]`.
    pub min_target_q: Vec<f64>,
    /// Individual target critic values at the sample.
    pub q1_target_vals: Vec<f64>,
    pub q2_target_vals: Vec<f64>,
}

/// Soft Bellman residual for both critics:
/// 1/2 (Q_i(z, a) - y)^2, y = r + gamma * mask * (min Q_bar(z', a') - alpha log pi(a')),
/// with y fully detached and a' ~ pi(. | history').
pub fn critic_loss(
    tape: &Tape,
    critics: &CriticNets,
    policy: &PolicyNet,
    temperature: &Temperature,
    rl: &RlBatch,
    expected_ids: &[u64],
    gamma: f64,
    noise: &[f64],
) -> Result<CriticLossOut> {
    if rl.window_ids != expected_ids {
        return Err(Error::Validation(
            "critic_loss: latents come from mismatched windows (window id check failed)".into(),
        ));
    }
    let b = rl.batch;
    let alpha = temperature.alpha();

    // Target side, computed on a scratch tape and materialized as data.
    let scratch = Tape::new();
    let hist = scratch.leaf(rl.policy_in_next.clone(), &[b, rl.policy_in_dim]);
    let dist = policy.dist(&scratch, &hist, Bind::Frozen);
    let (a_next, _, log_pi) = dist.rsample_with_log_prob(noise);
    let z_next = scratch.leaf(rl.critic_in_next.clone(), &[b, rl.critic_in_dim]);
    let q1t = critics.q(&scratch, &critics.q1_target, &z_next, &a_next, Bind::Frozen).value();
    let q2t = critics.q(&scratch, &critics.q2_target, &z_next, &a_next, Bind::Frozen).value();
    let log_pi = log_pi.value();

    let mut targets = Vec::with_capacity(b);
    let mut min_q = Vec::with_capacity(b);
    for i in 0..b {
        let soft_v = q1t[i].min(q2t[i]) - alpha * log_pi[i];
        min_q.push(q1t[i].min(q2t[i]));
        targets.push(rl.reward_last[i] + gamma * rl.bootstrap_mask[i] * soft_v);
    }

    // Live side on the caller's tape.
    let z_prev = tape.leaf(rl.critic_in_prev.clone(), &[b, rl.critic_in_dim]);
    let a_prev = tape.leaf(rl.action_last.clone(), &[b, rl.action_dim]);
    let y = tape.leaf(targets.clone(), &[b, 1]);
    let q1 = critics.q(tape, &critics.q1, &z_prev, &a_prev, Bind::Trainable);
    let q2 = critics.q(tape, &critics.q2, &z_prev, &a_prev, Bind::Trainable);
    let j_q1 = (q1 - &y).square().scale(0.5).mean();
    let j_q2 = (q2 - &y).square().scale(0.5).mean();

    Ok(CriticLossOut {
        j_q1,
        j_q2,
        targets,
        min_target_q: min_q,
        q1_target_vals: q1t,
        q2_target_vals: q2t,
    })
}

pub struct ActorLossOut {
    pub loss: Tensor,
    /// Detached log pi values for the temperature update, `[batch]`.
    pub log_probs: Vec<f64>,
}

/// E[alpha log pi(a'|h) - min_i Q_i(z', a')] with a' reparameterized and the
/// critic parameters frozen; gradients reach only the policy.
pub fn actor_loss(
    tape: &Tape,
    policy: &PolicyNet,
    critics: &CriticNets,
    temperature: &Temperature,
    rl: &RlBatch,
    noise: &[f64],
) -> Result<ActorLossOut> {
    let b = rl.batch;
    let hist = tape.leaf(rl.policy_in_next.clone(), &[b, rl.policy_in_dim]);
    let dist = policy.dist(tape, &hist, Bind::Trainable);
    let (a_next, _, log_pi) = dist.rsample_with_log_prob(noise);
    let z_next = tape.leaf(rl.critic_in_next.clone(), &[b, rl.critic_in_dim]);
    let q1 = critics.q(tape, &critics.q1, &z_next, &a_next, Bind::Frozen);
    let q2 = critics.q(tape, &critics.q2, &z_next, &a_next, Bind::Frozen);
    let min_q = q1.minimum(&q2);
    let loss = (log_pi.scale(temperature.alpha()) - min_q).mean();
    let log_probs = log_pi.value();
    Ok(ActorLossOut { loss, log_probs })
}

/// E[-exp(log_alpha) * (log pi + target_entropy)] with log pi detached.
pub fn temperature_loss(tape: &Tape, temperature: &Temperature, log_probs: &[f64]) -> Tensor {
    let mean_excess = log_probs.iter().map(|lp| lp + temperature.target_entropy).sum::<f64>()
        / log_probs.len() as f64;
    let log_alpha = tape.param(&temperature.log_alpha);
    log_alpha.exp().scale(-mean_excess).sum()
}

/// Standard-normal noise for a `[batch, action_dim]` policy sample.
pub fn policy_noise(rng: &mut ChaCha8Rng, batch: usize, action_dim: usize) -> Vec<f64> {
    use rand::Rng;
    (0..batch * action_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}
