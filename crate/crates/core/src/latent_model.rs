//! Sequential latent-variable model: generative and inference networks,
//! filtering sampler, and the model loss.
//!
//! The default (fully stochastic, factored) model splits the latent state into
//! a small z1 inferred from data and a larger z2 always drawn from the
//! generative conditional, so the per-step KL collapses to the z1 terms.
//! Variants: an unfactored temporal filter over a single z, and a
//! non-sequential per-frame VAE with no dynamics.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamGroup, Tape, Tensor};
use crate::distributions::{kl_diag_gaussian, DiagGaussian, LN_2PI};
use crate::nn::{Bind, ConvDecoder, ConvEncoder, GaussianNet, Mlp};
use crate::replay::WindowBatch;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    FactoredStochastic,
    UnfactoredFiltering,
    NonSequentialVae,
}

/// Per-timestep latent sample. In the factored model z = (z1, z2); the other
/// variants keep everything in z1 and leave z2 zero-width.
#[derive(Clone)]
pub struct LatentSample {
    pub z1: Tensor,
    pub z2: Tensor,
}

impl LatentSample {
    /// Concatenated full latent state.
    pub fn full(&self, tape: &Tape) -> Tensor {
        if self.z2.shape()[1] == 0 {
            self.z1.clone()
        } else {
            tape.concat(&[&self.z1, &self.z2], 1)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub obs_dim: usize,
    /// Treat observations as flattened 16x16 grayscale images.
    pub image_obs: bool,
    pub action_dim: usize,
    pub latent1_dim: usize,
    pub latent2_dim: usize,
    pub hidden_width: usize,
    /// Hidden layers per Gaussian net; 0 makes every map linear (used by the
    /// hand-set linear-Gaussian tests).
    pub hidden_layers: usize,
    pub feature_dim: usize,
    /// Fixed decoder output variance.
    pub sigma_sq: f64,
    /// Train the reward head and include its NLL in the model loss.
    pub include_reward: bool,
}

impl ModelConfig {
    pub fn desk_default(obs_dim: usize, action_dim: usize) -> Self {
        ModelConfig {
            variant: ModelVariant::FactoredStochastic,
            obs_dim,
            image_obs: false,
            action_dim,
            latent1_dim: 8,
            latent2_dim: 32,
            hidden_width: 64,
            hidden_layers: 2,
            feature_dim: 64,
            sigma_sq: 0.1,
            include_reward: true,
        }
    }

    /// Full-size preset: latents 32+256, width 256.
    pub fn paper_preset(mut self) -> Self {
        self.latent1_dim = 32;
        self.latent2_dim = 256;
        self.hidden_width = 256;
        self.feature_dim = 256;
        self
    }

    /// Width of the inferred latent: z1 for the factored model, the whole
    /// state otherwise.
    fn d1(&self) -> usize {
        match self.variant {
            ModelVariant::FactoredStochastic => self.latent1_dim,
            _ => self.latent1_dim + self.latent2_dim,
        }
    }

    fn d2(&self) -> usize {
        match self.variant {
            ModelVariant::FactoredStochastic => self.latent2_dim,
            _ => 0,
        }
    }

    pub fn latent_total(&self) -> usize {
        self.latent1_dim + self.latent2_dim
    }
}

pub enum Encoder {
    Mlp(Mlp),
    Conv(ConvEncoder),
}

impl Encoder {
    /// Feature map with a linear readout; hidden layers are leaky-ReLU.
    pub fn forward(&self, tape: &Tape, x: &Tensor, mode: Bind) -> Tensor {
        match self {
            Encoder::Mlp(m) => m.forward(tape, x, mode),
            Encoder::Conv(c) => c.forward(tape, x, mode),
        }
    }

    fn params(&self, group: &mut ParamGroup) {
        match self {
            Encoder::Mlp(m) => m.params(group),
            Encoder::Conv(c) => c.params(group),
        }
    }
}

pub enum Decoder {
    Mlp(Mlp),
    Conv(ConvDecoder),
}

impl Decoder {
    fn forward(&self, tape: &Tape, z: &Tensor, mode: Bind) -> Tensor {
        match self {
            Decoder::Mlp(m) => m.forward(tape, z, mode),
            Decoder::Conv(c) => c.forward(tape, z, mode),
        }
    }

    fn params(&self, group: &mut ParamGroup) {
        match self {
            Decoder::Mlp(m) => m.params(group),
            Decoder::Conv(c) => c.params(group),
        }
    }
}

/// All model networks. The variational distribution over z2 reuses the
/// generative networks exactly, so no separate q-parameters for z2 exist.
pub struct ModelNets {
    pub config: ModelConfig,
    pub encoder: Encoder,
    /// q(z1_1 | x_1) for the sequential variants; per-frame posterior for the VAE.
    pub q_first: GaussianNet,
    /// q(z1_{t+1} | feat_{t+1}, z2_t, a_t); absent for the VAE.
    pub q_step: Option<GaussianNet>,
    /// p(z2_1 | z1_1); factored only.
    pub prior2_first: Option<GaussianNet>,
    /// p(z1_{t+1} | z2_t, a_t); absent for the VAE.
    pub prior_step: Option<GaussianNet>,
    /// p(z2_{t+1} | z1_{t+1}, z2_t, a_t); factored only.
    pub prior2_step: Option<GaussianNet>,
    /// Observation decoder with fixed variance sigma_sq.
    pub decoder: Decoder,
    /// p(r_t | z_t, a_t, z_{t+1}).
    pub reward_net: GaussianNet,
}

impl ModelNets {
    pub fn new(rng: &mut ChaCha8Rng, config: ModelConfig) -> Self {
        let c = &config;
        let h = vec![c.hidden_width; c.hidden_layers];
        let enc_hidden = vec![c.hidden_width; c.hidden_layers.min(1)];
        let d1 = c.d1();
        let d2 = c.d2();
        let z_total = c.latent_total();
        let factored = c.variant == ModelVariant::FactoredStochastic;
        let sequential = c.variant != ModelVariant::NonSequentialVae;

        let encoder = if c.image_obs {
            Encoder::Conv(ConvEncoder::new(rng, "model/enc", 1, c.feature_dim))
        } else {
            Encoder::Mlp(Mlp::new(rng, "model/enc", c.obs_dim, &enc_hidden, c.feature_dim))
        };
        let q_first = GaussianNet::new(rng, "model/q_first", c.feature_dim, &h, d1);
        let q_step = sequential.then(|| {
            GaussianNet::new(rng, "model/q_step", c.feature_dim + d2_or_z(c) + c.action_dim, &h, d1)
        });
        let prior2_first = factored.then(|| GaussianNet::new(rng, "model/p2_first", d1, &h, d2));
        let prior_step = sequential
            .then(|| GaussianNet::new(rng, "model/p_step", d2_or_z(c) + c.action_dim, &h, d1));
        let prior2_step =
            factored.then(|| GaussianNet::new(rng, "model/p2_step", d1 + d2 + c.action_dim, &h, d2));
        let decoder = if c.image_obs {
            Decoder::Conv(ConvDecoder::new(rng, "model/dec", z_total, 1))
        } else {
            Decoder::Mlp(Mlp::new(rng, "model/dec", z_total, &h, c.obs_dim))
        };
        let reward_net =
            GaussianNet::new(rng, "model/reward", 2 * z_total + c.action_dim, &h, 1);

        ModelNets {
            config,
            encoder,
            q_first,
            q_step,
            prior2_first,
            prior_step,
            prior2_step,
            decoder,
            reward_net,
        }
    }

    pub fn params(&self) -> ParamGroup {
        let mut g = ParamGroup::new();
        self.encoder.params(&mut g);
        self.q_first.params(&mut g);
        if let Some(n) = &self.q_step {
            n.params(&mut g);
        }
        if let Some(n) = &self.prior2_first {
            n.params(&mut g);
        }
        if let Some(n) = &self.prior_step {
            n.params(&mut g);
        }
        if let Some(n) = &self.prior2_step {
            n.params(&mut g);
        }
        self.decoder.params(&mut g);
        self.reward_net.params(&mut g);
        g
    }
}

fn d2_or_z(c: &ModelConfig) -> usize {
    // The recurrent conditioning variable: z2 when factored, the whole z otherwise.
    match c.variant {
        ModelVariant::FactoredStochastic => c.latent2_dim,
        _ => c.latent1_dim + c.latent2_dim,
    }
}

/// Standard-normal noise for one filtering pass.
#[derive(Debug, Clone)]
pub struct FilterNoise {
    /// Per step t in 0..=tau: `[batch * d1]`.
    pub z1: Vec<Vec<f64>>,
    /// Per step t: `[batch * d2]` (empty vectors when d2 == 0).
    pub z2: Vec<Vec<f64>>,
}

impl FilterNoise {
    pub fn sample(rng: &mut ChaCha8Rng, steps: usize, batch: usize, config: &ModelConfig) -> Self {
        let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
        };
        FilterNoise {
            z1: (0..steps).map(|_| draw(rng, batch * config.d1())).collect(),
            z2: (0..steps).map(|_| draw(rng, batch * config.d2())).collect(),
        }
    }

    pub fn zeros(steps: usize, batch: usize, config: &ModelConfig) -> Self {
        FilterNoise {
            z1: vec![vec![0.0; batch * config.d1()]; steps],
            z2: vec![vec![0.0; batch * config.d2()]; steps],
        }
    }
}

/// Everything the filtering pass produced, kept on the tape so the losses can
/// reuse the same recorded subgraph.
pub struct FilterOutput {
    pub variant: ModelVariant,
    pub latents: Vec<LatentSample>,
    /// Posterior over the inferred latent at each step.
    pub q1: Vec<DiagGaussian>,
    /// Matching prior (standard normal at the first slot).
    pub p1: Vec<DiagGaussian>,
    /// z2 generative conditional per step (factored variant only).
    pub p2: Vec<Option<DiagGaussian>>,
    /// Shared encoder features per step, `[batch, feature_dim]`.
    pub features: Vec<Tensor>,
    pub window_ids: Vec<u64>,
}

impl ModelNets {
    /// Ancestral reparameterized sampling from the filtering distribution.
    /// Gradients flow through the whole chain when `mode` is `Trainable`.
    pub fn infer_filter(
        &self,
        tape: &Tape,
        batch: &WindowBatch,
        noise: &FilterNoise,
        mode: Bind,
    ) -> Result<FilterOutput> {
        if batch.tau < 1 {
            return Err(Error::Validation(
                "infer_filter: window must contain at least 2 observations".into(),
            ));
        }
        if noise.z1.len() != batch.tau + 1 {
            return Err(Error::Validation(format!(
                "infer_filter: noise has {} steps, window has {}",
                noise.z1.len(),
                batch.tau + 1
            )));
        }
        let c = &self.config;
        let b = batch.batch;
        let d1 = c.d1();
        let d2 = c.d2();

        let mut out = FilterOutput {
            variant: c.variant,
            latents: Vec::with_capacity(batch.tau + 1),
            q1: Vec::with_capacity(batch.tau + 1),
            p1: Vec::with_capacity(batch.tau + 1),
            p2: Vec::with_capacity(batch.tau + 1),
            features: Vec::with_capacity(batch.tau + 1),
            window_ids: batch.window_ids.clone(),
        };

        for t in 0..=batch.tau {
            let x = tape.leaf(batch.obs[t].clone(), &[b, batch.obs_dim]);
            out.features.push(self.encoder.forward(tape, &x, mode));
        }

        // First slot: z1_1 ~ q(.|x_1) against the standard-normal prior.
        let q0 = self.q_first.forward(tape, &out.features[0], mode);
        let z1_0 = q0.rsample(&noise.z1[0]);
        let (z2_0, p2_0) = match &self.prior2_first {
            Some(net) => {
                let dist = net.forward(tape, &z1_0, mode);
                (dist.rsample(&noise.z2[0]), Some(dist))
            }
            None => (tape.leaf(vec![], &[b, 0]), None),
        };
        out.p1.push(DiagGaussian::standard(tape, b, d1));
        out.q1.push(q0);
        out.p2.push(p2_0);
        out.latents.push(LatentSample { z1: z1_0, z2: z2_0 });

        for t in 0..batch.tau {
            let a = tape.leaf(batch.actions[t].clone(), &[b, batch.action_dim]);
            let prev = &out.latents[t];
            // The recurrent conditioning variable: z2 when factored, z otherwise.
            let carry = if d2 > 0 { prev.z2.clone() } else { prev.z1.clone() };

            let (q_t, p_t) = match c.variant {
                ModelVariant::NonSequentialVae => (
                    self.q_first.forward(tape, &out.features[t + 1], mode),
                    DiagGaussian::standard(tape, b, d1),
                ),
                _ => {
                    let q_in = tape.concat(&[&out.features[t + 1], &carry, &a], 1);
                    let p_in = tape.concat(&[&carry, &a], 1);
                    (
                        self.q_step.as_ref().expect("sequential").forward(tape, &q_in, mode),
                        self.prior_step.as_ref().expect("sequential").forward(tape, &p_in, mode),
                    )
                }
            };
            let z1_t = q_t.rsample(&noise.z1[t + 1]);
            let (z2_t, p2_t) = match &self.prior2_step {
                Some(net) => {
                    let p2_in = tape.concat(&[&z1_t, &carry, &a], 1);
                    let dist = net.forward(tape, &p2_in, mode);
                    (dist.rsample(&noise.z2[t + 1]), Some(dist))
                }
                None => (tape.leaf(vec![], &[b, 0]), None),
            };
            out.q1.push(q_t);
            out.p1.push(p_t);
            out.p2.push(p2_t);
            out.latents.push(LatentSample { z1: z1_t, z2: z2_t });
        }
        Ok(out)
    }

    /// Negative per-window ELBO (plus reward NLL when enabled), masked and
    /// mean-reduced over the batch.
    pub fn model_loss(
        &self,
        tape: &Tape,
        batch: &WindowBatch,
        filter: &FilterOutput,
    ) -> Result<ModelLoss> {
        if filter.variant != self.config.variant {
            return Err(Error::Validation("model_loss: filter produced by a different variant".into()));
        }
        if filter.window_ids != batch.window_ids {
            return Err(Error::Validation("model_loss: latents from mismatched windows".into()));
        }
        let b = batch.batch;
        let c = &self.config;
        let half_log_norm = 0.5 * (LN_2PI + c.sigma_sq.ln());
        // Decoder/reward binding follows how the filter was run.
        let mode = bind_like(&filter.latents[0].z1);

        let mut per_window: Option<Tensor> = None;
        let mut recon_diag = 0.0;
        let mut kl_diag = 0.0;
        let mut reward_diag = 0.0;

        let add = |acc: &mut Option<Tensor>, term: Tensor| {
            *acc = Some(match acc.take() {
                Some(t) => t + term,
                None => term,
            });
        };

        for t in 0..=batch.tau {
            let mask = tape.leaf(batch.masks[t].clone(), &[b, 1]);
            let x = tape.leaf(batch.obs[t].clone(), &[b, batch.obs_dim]);
            let z = filter.latents[t].full(tape);
            let mean = self.decoder.forward(tape, &z, mode);
            // -log p(x|z) with fixed variance: squared error / (2 sigma^2)
            // plus the Gaussian normalizer per dimension.
            let recon = (x - &mean)
                .square()
                .scale(1.0 / (2.0 * c.sigma_sq))
                .add_scalar(half_log_norm)
                .sum_axis(1)
                * &mask;
            let kl = kl_diag_gaussian(&filter.q1[t], &filter.p1[t]) * &mask;
            recon_diag += batch_mean(&recon);
            kl_diag += batch_mean(&kl);
            add(&mut per_window, recon + kl);
        }

        if c.include_reward {
            for t in 0..batch.tau {
                let mask = tape.leaf(batch.masks[t].clone(), &[b, 1]);
                let a = tape.leaf(batch.actions[t].clone(), &[b, batch.action_dim]);
                let r = tape.leaf(batch.rewards[t].clone(), &[b, 1]);
                let z_t = filter.latents[t].full(tape);
                let z_next = filter.latents[t + 1].full(tape);
                let input = tape.concat(&[&z_t, &a, &z_next], 1);
                let dist = self.reward_net.forward(tape, &input, mode);
                let nll = dist.log_prob(&r).negate() * &mask;
                reward_diag += batch_mean(&nll);
                add(&mut per_window, nll);
            }
        }

        let per_window = per_window.expect("at least one step");
        let total = per_window.mean();
        Ok(ModelLoss { total, per_window, recon: recon_diag, kl: kl_diag, reward_nll: reward_diag })
    }

    /// Single-draw estimators of the per-step KL at `step`: the full-state
    /// form evaluates all four log-densities at a shared (z1, z2) draw; the
    /// simplified form evaluates only the z1 pair at the same z1. The z2
    /// terms cancel analytically, so the two floats agree to machine
    /// precision; averaged over fresh draws both approach the closed form.
    pub fn kl_full_vs_simplified(&self, filter: &FilterOutput, step: usize) -> Result<(f64, f64)> {
        if self.config.variant != ModelVariant::FactoredStochastic {
            return Err(Error::Validation("kl_full_vs_simplified requires the factored variant".into()));
        }
        let z1 = &filter.latents[step].z1;
        let z2 = &filter.latents[step].z2;
        let q1 = &filter.q1[step];
        let p1 = &filter.p1[step];
        let p2 = filter.p2[step].as_ref().expect("factored filter output");

        let lq1 = q1.log_prob(z1).mean().scalar();
        let lp1 = p1.log_prob(z1).mean().scalar();
        // The q-side z2 density reuses the generative network exactly; evaluate
        // it twice so the cancellation is real arithmetic, not bookkeeping.
        // Grouped per variable so the z2 pair cancels to the same bits.
        let lq2 = p2.log_prob(z2).mean().scalar();
        let lp2 = p2.log_prob(z2).mean().scalar();
        let full = (lq1 - lp1) + (lq2 - lp2);
        let simplified = lq1 - lp1;
        Ok((full, simplified))
    }

    /// Closed-form z1 KL at `step`, batch-mean.
    pub fn kl_closed_form(&self, filter: &FilterOutput, step: usize) -> f64 {
        kl_diag_gaussian(&filter.q1[step], &filter.p1[step]).mean().scalar()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    /// z_1 from p(z1); dynamics only. Ignores every observation.
    Prior,
    /// z_1 from q(.|x_1); dynamics afterwards.
    ConditionalPrior,
    /// Full filtering posterior.
    Posterior,
}

#[derive(Debug)]
pub struct ModelLoss {
    /// Batch-mean scalar loss.
    pub total: Tensor,
    /// Per-window loss `[batch, 1]` before the mean.
    pub per_window: Tensor,
    pub recon: f64,
    pub kl: f64,
    pub reward_nll: f64,
}

/// One line of a rollout dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub mode: String,
    pub step: usize,
    pub predicted_mean: Vec<f64>,
    pub ground_truth: Vec<f64>,
}

impl ModelNets {
    /// Decoder means per step under the requested sampling mode.
    pub fn generate_rollout(
        &self,
        tape: &Tape,
        mode: RolloutMode,
        batch: &WindowBatch,
        noise: &FilterNoise,
    ) -> Result<Vec<Vec<f64>>> {
        if batch.actions.is_empty() {
            return Err(Error::Validation("generate_rollout: window carries no actions".into()));
        }
        let c = &self.config;
        let b = batch.batch;
        let d1 = c.d1();
        let d2 = c.d2();

        if mode == RolloutMode::Posterior {
            let filter = self.infer_filter(tape, batch, noise, Bind::Frozen)?;
            return Ok(filter
                .latents
                .iter()
                .map(|z| self.decoder.forward(tape, &z.full(tape), Bind::Frozen).value())
                .collect());
        }

        // First latent: prior draw or encoded first frame.
        let z1_0 = match mode {
            RolloutMode::Prior => {
                DiagGaussian::standard(tape, b, d1).rsample(&noise.z1[0])
            }
            _ => {
                let x0 = tape.leaf(batch.obs[0].clone(), &[b, batch.obs_dim]);
                let feat = self.encoder.forward(tape, &x0, Bind::Frozen);
                self.q_first.forward(tape, &feat, Bind::Frozen).rsample(&noise.z1[0])
            }
        };
        let z2_0 = match &self.prior2_first {
            Some(net) => net.forward(tape, &z1_0, Bind::Frozen).rsample(&noise.z2[0]),
            None => tape.leaf(vec![], &[b, 0]),
        };
        let mut z = LatentSample { z1: z1_0, z2: z2_0 };
        let mut out = Vec::with_capacity(batch.tau + 1);
        out.push(self.decoder.forward(tape, &z.full(tape), Bind::Frozen).value());

        for t in 0..batch.tau {
            let a = tape.leaf(batch.actions[t].clone(), &[b, batch.action_dim]);
            let carry = if d2 > 0 { z.z2.clone() } else { z.z1.clone() };
            let z1_next = match c.variant {
                ModelVariant::NonSequentialVae => {
                    // No dynamics: fresh prior draws per frame.
                    DiagGaussian::standard(tape, b, d1).rsample(&noise.z1[t + 1])
                }
                _ => {
                    let p_in = tape.concat(&[&carry, &a], 1);
                    self.prior_step
                        .as_ref()
                        .expect("sequential")
                        .forward(tape, &p_in, Bind::Frozen)
                        .rsample(&noise.z1[t + 1])
                }
            };
            let z2_next = match &self.prior2_step {
                Some(net) => {
                    let p2_in = tape.concat(&[&z1_next, &carry, &a], 1);
                    net.forward(tape, &p2_in, Bind::Frozen).rsample(&noise.z2[t + 1])
                }
                None => tape.leaf(vec![], &[b, 0]),
            };
            z = LatentSample { z1: z1_next, z2: z2_next };
            out.push(self.decoder.forward(tape, &z.full(tape), Bind::Frozen).value());
        }
        Ok(out)
    }
}

fn bind_like(t: &Tensor) -> Bind {
    if t.requires_grad() {
        Bind::Trainable
    } else {
        Bind::Frozen
    }
}

fn batch_mean(t: &Tensor) -> f64 {
    let v = t.value();
    v.iter().sum::<f64>() / v.len() as f64
}
