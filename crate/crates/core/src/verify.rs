//! Named verification suites: oracle-backed property checks runnable from the
//! CLI (`verify <suite>`) and reused by the acceptance tests.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::actor_critic::{actor_loss, critic_loss, policy_noise, CriticNets, PolicyNet, Temperature};
use crate::autograd::{adam_step_group, grad_check, Param, Tape, Tensor};
use crate::distributions::{kl_diag_gaussian, DiagGaussian, TanhDiagGaussian, LN_2PI};
use crate::envs::{EnvConfig, LgssParams};
use crate::latent_model::{FilterNoise, ModelConfig, ModelNets, ModelVariant};
use crate::nn::Bind;
use crate::oracle::{kalman_loglik, soft_value, tabular_soft_value_iteration, KalmanModel, TabularMdp};
use crate::replay::{ReplayBuffer, SequenceWindow, WindowBatch};
use crate::{Error, Result};

pub const SUITES: &[&str] =
    &["gradcheck", "distributions", "elbo_bound", "kl_identity", "replay", "oracle"];

#[derive(Debug, Clone)]
pub struct PropertyResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl PropertyResult {
    fn new(name: &str, pass: bool, detail: String) -> Self {
        PropertyResult { name: name.to_string(), pass, detail }
    }
}

/// Run one named suite; unknown names list the valid suites.
pub fn run_suite(name: &str) -> Result<Vec<PropertyResult>> {
    match name {
        "gradcheck" => Ok(gradcheck_suite(10)),
        "distributions" => Ok(distributions_suite()),
        "elbo_bound" => Ok(elbo_bound_suite(None)),
        "kl_identity" => Ok(kl_identity_suite(10)),
        "replay" => Ok(replay_suite()),
        "oracle" => Ok(oracle_suite()),
        other => Err(Error::Validation(format!(
            "unknown suite {other:?}; valid suites: {}",
            SUITES.join(", ")
        ))),
    }
}

fn small_model_config(include_reward: bool) -> ModelConfig {
    ModelConfig {
        variant: ModelVariant::FactoredStochastic,
        obs_dim: 2,
        image_obs: false,
        action_dim: 1,
        latent1_dim: 2,
        latent2_dim: 4,
        hidden_width: 8,
        hidden_layers: 1,
        feature_dim: 4,
        sigma_sq: 0.1,
        include_reward,
    }
}

fn random_window_batch(rng: &mut ChaCha8Rng, batch: usize, tau: usize, obs_dim: usize) -> WindowBatch {
    let windows: Vec<SequenceWindow> = (0..batch)
        .map(|i| SequenceWindow {
            obs: (0..=tau)
                .map(|_| (0..obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
            actions: (0..tau).map(|_| vec![rng.random_range(-0.9..0.9)]).collect(),
            rewards: (0..tau).map(|_| rng.random_range(-1.0..1.0)).collect(),
            valid_mask: vec![true; tau + 1],
            terminal: false,
            failure: false,
            window_id: i as u64,
        })
        .collect();
    WindowBatch::from_windows(&windows)
}

/// Max relative gradient error of the full model loss over every parameter,
/// against central differences.
pub fn model_loss_grad_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = small_model_config(true);
    let nets = ModelNets::new(&mut rng, cfg.clone());
    let batch = random_window_batch(&mut rng, 2, 3, cfg.obs_dim);
    let noise = FilterNoise::sample(&mut rng, 4, 2, &cfg);

    let loss_at = |nets: &ModelNets| -> f64 {
        let tape = Tape::new();
        let filter = nets.infer_filter(&tape, &batch, &noise, Bind::Frozen).unwrap();
        nets.model_loss(&tape, &batch, &filter).unwrap().total.scalar()
    };
    let tape = Tape::new();
    let filter = nets.infer_filter(&tape, &batch, &noise, Bind::Trainable).unwrap();
    let loss = nets.model_loss(&tape, &batch, &filter).unwrap();
    tape.backward(&loss.total).unwrap();
    let params: Vec<Param> = nets.params().iter().cloned().collect();
    max_param_grad_error(&tape, &params, || loss_at(&nets))
}

/// Max relative gradient error of the critic loss over critic parameters.
pub fn critic_loss_grad_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let critics = CriticNets::new(&mut rng, 3, 1, &[6]);
    let policy = PolicyNet::new(&mut rng, 4, 1, &[6], 1.0);
    let temp = Temperature::new(0.2, -1.0);
    let rl = random_rl_batch(&mut rng, 4, 3, 4, 1);
    let ids = rl.window_ids.clone();
    let noise = policy_noise(&mut rng, 4, 1);

    let loss_at = |critics: &CriticNets| -> f64 {
        let tape = Tape::new();
        let out = critic_loss(&tape, critics, &policy, &temp, &rl, &ids, 0.99, &noise).unwrap();
        out.j_q1.scalar() + out.j_q2.scalar()
    };
    let tape = Tape::new();
    let out = critic_loss(&tape, &critics, &policy, &temp, &rl, &ids, 0.99, &noise).unwrap();
    tape.backward(&(out.j_q1 + out.j_q2)).unwrap();
    let params: Vec<Param> = critics.params().iter().cloned().collect();
    max_param_grad_error(&tape, &params, || loss_at(&critics))
}

/// Max relative gradient error of the actor loss over policy parameters.
pub fn actor_loss_grad_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let critics = CriticNets::new(&mut rng, 3, 1, &[6]);
    let policy = PolicyNet::new(&mut rng, 4, 1, &[6], 1.0);
    let temp = Temperature::new(0.31, -1.0);
    let rl = random_rl_batch(&mut rng, 4, 3, 4, 1);
    let noise = policy_noise(&mut rng, 4, 1);

    let loss_at = |policy: &PolicyNet| -> f64 {
        let tape = Tape::new();
        actor_loss(&tape, policy, &critics, &temp, &rl, &noise).unwrap().loss.scalar()
    };
    let tape = Tape::new();
    let out = actor_loss(&tape, &policy, &critics, &temp, &rl, &noise).unwrap();
    tape.backward(&out.loss).unwrap();
    let params: Vec<Param> = policy.params().iter().cloned().collect();
    max_param_grad_error(&tape, &params, || loss_at(&policy))
}

fn random_rl_batch(
    rng: &mut ChaCha8Rng,
    batch: usize,
    critic_in: usize,
    policy_in: usize,
    action_dim: usize,
) -> crate::actor_critic::RlBatch {
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    crate::actor_critic::RlBatch {
        batch,
        window_ids: (0..batch as u64).collect(),
        critic_in_prev: draw(batch * critic_in),
        critic_in_next: draw(batch * critic_in),
        policy_in_next: draw(batch * policy_in),
        action_last: draw(batch * action_dim).iter().map(|v| 0.9 * v).collect(),
        reward_last: draw(batch),
        bootstrap_mask: vec![1.0; batch],
        critic_in_dim: critic_in,
        policy_in_dim: policy_in,
        action_dim,
    }
}

/// Central-difference check over an arbitrary parameter set with a
/// re-evaluation closure. `loss_at` must observe mutations of the params.
fn max_param_grad_error(tape: &Tape, params: &[Param], loss_at: impl Fn() -> f64) -> f64 {
    let grads = tape.param_grads();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for p in params {
        let analytic = grads
            .iter()
            .find(|(gp, _)| gp.key() == p.key())
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| vec![0.0; p.numel()]);
        let base = p.value();
        for i in 0..base.len() {
            let mut bumped = base.clone();
            bumped[i] = base[i] + h;
            p.set_data(&bumped);
            let plus = loss_at();
            bumped[i] = base[i] - h;
            p.set_data(&bumped);
            let minus = loss_at();
            p.set_data(&base);
            let fd = (plus - minus) / (2.0 * h);
            worst = worst.max((analytic[i] - fd).abs() / fd.abs().max(1.0));
        }
    }
    worst
}

/// Primitive-by-primitive gradient checks plus the three composite losses.
pub fn gradcheck_suite(seeds: u64) -> Vec<PropertyResult> {
    let mut out = Vec::new();
    let tol = 1e-5;

    let mut worst_primitive: (String, f64) = (String::new(), 0.0);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let point: Vec<f64> = (0..6).map(|_| rng.random_range(-0.9..0.9)).collect();
        let other: Vec<f64> = (0..6).map(|_| rng.random_range(0.5..1.5)).collect();
        let kernel: Vec<f64> = (0..2 * 1 * 3 * 3).map(|_| rng.random_range(-0.5..0.5)).collect();
        let image: Vec<f64> = (0..1 * 1 * 4 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();

        let o = other.clone();
        let k = kernel.clone();
        let img = image.clone();
        let k2 = kernel.clone();
        let cases: Vec<(&str, Box<dyn Fn(&Tape, &Tensor) -> Tensor>)> = vec![
            ("matmul", Box::new(move |tape: &Tape, x: &Tensor| {
                let b = tape.leaf(o.clone(), &[3, 2]);
                x.reshape(&[2, 3]).matmul(&b).square().sum()
            })),
            ("add_sub", Box::new(|_: &Tape, x: &Tensor| (x.add_scalar(0.5) - x.scale(0.25)).square().sum())),
            ("mul_div", Box::new(|_: &Tape, x: &Tensor| {
                let y = x.add_scalar(2.0);
                (x * &y / y.square()).sum()
            })),
            ("exp", Box::new(|_: &Tape, x: &Tensor| x.exp().sum())),
            ("log", Box::new(|_: &Tape, x: &Tensor| x.add_scalar(2.0).log().sum())),
            ("tanh", Box::new(|_: &Tape, x: &Tensor| x.tanh().sum())),
            ("softplus", Box::new(|_: &Tape, x: &Tensor| x.softplus().sum())),
            ("leaky_relu", Box::new(|_: &Tape, x: &Tensor| x.leaky_relu().square().sum())),
            ("sum_mean", Box::new(|_: &Tape, x: &Tensor| {
                x.reshape(&[2, 3]).sum_axis(1).square().mean() + x.mean()
            })),
            ("broadcast", Box::new(|tape: &Tape, x: &Tensor| {
                let big = tape.leaf(vec![1.0, -2.0, 0.5, 2.0, 1.5, -1.0], &[2, 3]);
                let row = x.slice_axis(0, 0, 3).reshape(&[1, 3]);
                (&big * &row.broadcast_to(&[2, 3])).sum() + x.sum()
            })),
            ("reshape_slice_concat", Box::new(|tape: &Tape, x: &Tensor| {
                let m = x.reshape(&[2, 3]);
                let a = m.slice_axis(1, 0, 1);
                let b = m.slice_axis(1, 1, 2);
                tape.concat(&[&b, &a], 1).square().sum()
            })),
            ("square_negate", Box::new(|_: &Tape, x: &Tensor| (-x.square()).sum())),
            ("clip_grad", Box::new(|_: &Tape, x: &Tensor| x.clip_grad(10.0).square().sum())),
            ("conv2d_s2", Box::new(move |tape: &Tape, x: &Tensor| {
                let kt = tape.leaf(k.clone(), &[2, 1, 3, 3]);
                x.reshape(&[1, 1, 4, 4]).conv2d_s2(&kt).square().sum()
            })),
            ("conv_transpose2d_s2", Box::new(move |tape: &Tape, kt: &Tensor| {
                let xt = tape.leaf(img.clone(), &[1, 1, 4, 4]);
                xt.conv_transpose2d_s2(&kt.reshape(&[1, 2, 3, 3])).square().sum()
            })),
        ];
        for (name, f) in cases {
            let point_for = match name {
                "conv2d_s2" => image.clone(),
                "conv_transpose2d_s2" => k2.clone(),
                _ => point.clone(),
            };
            match grad_check(f, &point_for, 1e-5) {
                Ok(err) => {
                    if err > worst_primitive.1 {
                        worst_primitive = (format!("{name} (seed {seed})"), err);
                    }
                }
                Err(e) => {
                    out.push(PropertyResult::new(
                        "primitives",
                        false,
                        format!("{name} at seed {seed}: {e}"),
                    ));
                    return out;
                }
            }
        }
    }
    out.push(PropertyResult::new(
        "primitives",
        worst_primitive.1 < tol,
        format!("worst {} rel err {:.2e} over {seeds} seeds", worst_primitive.0, worst_primitive.1),
    ));

    for (name, f) in [
        ("model_loss", model_loss_grad_error as fn(u64) -> f64),
        ("critic_loss", critic_loss_grad_error),
        ("actor_loss", actor_loss_grad_error),
    ] {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            worst = worst.max(f(seed));
        }
        out.push(PropertyResult::new(
            name,
            worst < tol,
            format!("worst rel err {worst:.2e} over {seeds} seeds"),
        ));
    }
    out
}

/// Closed-form KL against Monte Carlo, tanh-Gaussian quadrature, rsample
/// pathwise gradients.
pub fn distributions_suite() -> Vec<PropertyResult> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1234);

    // KL vs MC at 1e5 samples, 3 standard errors.
    {
        let (mq, sq, mp, sp) = (0.7, 1.6, -0.4, 0.8);
        let n = 100_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let e: f64 = rng.sample(StandardNormal);
            let x = mq + sq * e;
            let lq = -0.5 * ((x - mq) / sq).powi(2) - f64::ln(sq) - 0.5 * LN_2PI;
            let lp = -0.5 * ((x - mp) / sp).powi(2) - f64::ln(sp) - 0.5 * LN_2PI;
            sum += lq - lp;
            sumsq += (lq - lp) * (lq - lp);
        }
        let mc = sum / n as f64;
        let se = ((sumsq / n as f64 - mc * mc) / n as f64).sqrt();
        let tape = Tape::new();
        let q = DiagGaussian::new(tape.leaf(vec![mq], &[1, 1]), tape.leaf(vec![sq], &[1, 1]));
        let p = DiagGaussian::new(tape.leaf(vec![mp], &[1, 1]), tape.leaf(vec![sp], &[1, 1]));
        let closed = kl_diag_gaussian(&q, &p).value()[0];
        out.push(PropertyResult::new(
            "kl_closed_form_vs_monte_carlo",
            (closed - mc).abs() <= 3.0 * se,
            format!("closed {closed:.6} vs mc {mc:.6} (3se {:.6})", 3.0 * se),
        ));
    }

    // Quadrature of the squashed density over (-1, 1).
    {
        let tape = Tape::new();
        let d = TanhDiagGaussian::new(DiagGaussian::new(
            tape.leaf(vec![0.3], &[1, 1]),
            tape.leaf(vec![1.2], &[1, 1]),
        ));
        let n = 20_000usize;
        let h = 2.0 / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            let a = -1.0 + (i as f64 + 0.5) * h;
            total += d.log_prob_action(&[a]).unwrap().value()[0].exp() * h;
        }
        out.push(PropertyResult::new(
            "tanh_density_integrates_to_one",
            (total - 1.0).abs() < 1e-3,
            format!("integral {total:.6}"),
        ));
    }

    // rsample pathwise gradients vs finite differences.
    {
        let eps = [0.9, -0.4];
        let err = grad_check(
            move |tape, p| {
                let mean = p.slice_axis(0, 0, 2).reshape(&[1, 2]);
                let std = p.slice_axis(0, 2, 2).reshape(&[1, 2]);
                let tgt = tape.leaf(vec![0.2, -0.8], &[1, 2]);
                (DiagGaussian::new(mean, std).rsample(&eps) - tgt).square().sum()
            },
            &[0.3, -0.1, 0.7, 1.3],
            1e-5,
        )
        .unwrap_or(f64::INFINITY);
        out.push(PropertyResult::new(
            "rsample_pathwise_gradients",
            err < 1e-6,
            format!("rel err {err:.2e}"),
        ));
    }
    out
}

/// Episodes from the partially observed LGSS system under random actions,
/// cut into full-coverage windows with their exact Kalman log-likelihoods.
pub fn lgss_window_dataset(
    seed: u64,
    count: usize,
    tau: usize,
) -> Result<(Vec<SequenceWindow>, Vec<f64>)> {
    let env_cfg = EnvConfig::lgss_pomdp();
    let mut env = env_cfg.build()?;
    let kalman = KalmanModel::from_env_params(&LgssParams::pomdp_2d());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut windows = Vec::with_capacity(count);
    let mut logliks = Vec::with_capacity(count);
    let mut buf = ReplayBuffer::new(1_000_000, env.spec().obs_dim, env.spec().action_dim);
    for i in 0..count {
        let first = env.reset(&mut rng);
        buf.begin_episode(first.clone());
        let mut obs_seq = vec![first];
        let mut act_seq = Vec::with_capacity(tau);
        for t in 0..tau {
            let action = vec![rng.random_range(-1.0..1.0)];
            let out = env.step(&action, &mut rng)?;
            buf.append_step(action.clone(), out.reward, out.obs.clone(), t + 1 == tau, false)?;
            obs_seq.push(out.obs);
            act_seq.push(action);
        }
        // Time-limit cut: treat the episode as done for dataset purposes.
        let w = SequenceWindow {
            obs: obs_seq.clone(),
            actions: act_seq.clone(),
            rewards: vec![0.0; tau],
            valid_mask: vec![true; tau + 1],
            terminal: false,
            failure: false,
            window_id: i as u64,
        };
        logliks.push(kalman_loglik(&kalman, &obs_seq, &act_seq)?);
        windows.push(w);
    }
    Ok((windows, logliks))
}

/// Model-only training on a fixed window pool.
pub fn train_model_on_windows(
    model: &ModelNets,
    pool: &[SequenceWindow],
    steps: usize,
    batch: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let params: Vec<Param> = model.params().iter().cloned().collect();
    for _ in 0..steps {
        let picks: Vec<SequenceWindow> =
            (0..batch).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect();
        let wb = WindowBatch::from_windows(&picks);
        let noise = FilterNoise::sample(rng, wb.tau + 1, wb.batch, &model.config);
        let tape = Tape::new();
        let filter = model.infer_filter(&tape, &wb, &noise, Bind::Trainable)?;
        let loss = model.model_loss(&tape, &wb, &filter)?;
        if !loss.total.scalar().is_finite() {
            return Err(Error::Numeric("model loss diverged during training".into()));
        }
        tape.backward(&loss.total)?;
        adam_step_group(&tape, &params, lr);
    }
    Ok(())
}

/// One-draw ELBO (negative model loss, reward head off) per window.
pub fn elbo_per_window(
    model: &ModelNets,
    windows: &[SequenceWindow],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    assert!(!model.config.include_reward, "the ELBO bound excludes the reward head");
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(64) {
        let wb = WindowBatch::from_windows(chunk);
        let noise = FilterNoise::sample(rng, wb.tau + 1, wb.batch, &model.config);
        let tape = Tape::new();
        let filter = model.infer_filter(&tape, &wb, &noise, Bind::Frozen)?;
        let loss = model.model_loss(&tape, &wb, &filter)?;
        out.extend(loss.per_window.value().iter().map(|l| -l));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ElboBoundCheck {
    pub mean_elbo: f64,
    pub mean_loglik: f64,
    /// Standard error of the mean (elbo - loglik) difference.
    pub se_diff: f64,
    pub gap: f64,
    pub holds: bool,
}

pub fn elbo_bound_check(
    model: &ModelNets,
    windows: &[SequenceWindow],
    logliks: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<ElboBoundCheck> {
    let elbos = elbo_per_window(model, windows, rng)?;
    let n = elbos.len() as f64;
    let diffs: Vec<f64> = elbos.iter().zip(logliks).map(|(e, l)| e - l).collect();
    let mean_diff = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean_diff) * (d - mean_diff)).sum::<f64>() / n;
    let se = (var / n).sqrt();
    let mean_elbo = elbos.iter().sum::<f64>() / n;
    let mean_loglik = logliks.iter().sum::<f64>() / n;
    Ok(ElboBoundCheck {
        mean_elbo,
        mean_loglik,
        se_diff: se,
        gap: mean_loglik - mean_elbo,
        holds: mean_diff <= 3.0 * se,
    })
}

/// The CLI elbo_bound suite: bound at initialization and after a short
/// training run, plus gap shrinkage. `fault_sigma` corrupts the decoder
/// variance used for evaluation (the loss is then not a valid bound), which
/// the fault-injection test uses to prove the check can fail.
pub fn elbo_bound_suite(fault_sigma: Option<f64>) -> Vec<PropertyResult> {
    let mut out = Vec::new();
    let run = || -> Result<Vec<PropertyResult>> {
        let mut results = Vec::new();
        let tau = 8;
        let (train_pool, _) = lgss_window_dataset(100, 200, tau)?;
        let (held_out, logliks) = lgss_window_dataset(101, 300, tau)?;

        let mut cfg = ModelConfig {
            variant: ModelVariant::FactoredStochastic,
            obs_dim: 1,
            image_obs: false,
            action_dim: 1,
            latent1_dim: 2,
            latent2_dim: 6,
            hidden_width: 24,
            hidden_layers: 2,
            feature_dim: 12,
            sigma_sq: 0.1,
            include_reward: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let nets = ModelNets::new(&mut rng, cfg.clone());
        let init = elbo_bound_check(&nets, &held_out, &logliks, &mut rng)?;
        results.push(PropertyResult::new(
            "bound_holds_at_initialization",
            init.holds,
            format!(
                "mean elbo {:.3} <= mean loglik {:.3} + 3se {:.3}",
                init.mean_elbo,
                init.mean_loglik,
                3.0 * init.se_diff
            ),
        ));

        train_model_on_windows(&nets, &train_pool, 1_000, 32, 1e-3, &mut rng)?;
        let nets = if let Some(sigma) = fault_sigma {
            cfg.sigma_sq = sigma;
            ModelNets { config: cfg, ..nets }
        } else {
            nets
        };
        let trained = elbo_bound_check(&nets, &held_out, &logliks, &mut rng)?;
        results.push(PropertyResult::new(
            "bound_holds_after_training",
            trained.holds,
            format!(
                "mean elbo {:.3} <= mean loglik {:.3} + 3se {:.3}",
                trained.mean_elbo,
                trained.mean_loglik,
                3.0 * trained.se_diff
            ),
        ));
        results.push(PropertyResult::new(
            "gap_shrinks_with_training",
            trained.gap < init.gap,
            format!("gap {:.3} -> {:.3}", init.gap, trained.gap),
        ));
        Ok(results)
    };
    match run() {
        Ok(results) => out.extend(results),
        Err(e) => out.push(PropertyResult::new("elbo_bound", false, e.to_string())),
    }
    out
}

/// Shared-sample exactness and independent-sample agreement of the factored
/// KL simplification, across random network initializations.
pub fn kl_identity_suite(inits: u64) -> Vec<PropertyResult> {
    let mut exact_ok = true;
    let mut exact_detail = String::new();
    let mut stat_ok = true;
    let mut stat_detail = String::new();

    for init in 0..inits {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + init);
        let cfg = small_model_config(false);
        let nets = ModelNets::new(&mut rng, cfg.clone());
        let batch = random_window_batch(&mut rng, 4, 3, cfg.obs_dim);

        // Exact under a shared z2 sample, every step and draw.
        for _ in 0..5 {
            let noise = FilterNoise::sample(&mut rng, 4, 4, &cfg);
            let tape = Tape::new();
            let filter = nets.infer_filter(&tape, &batch, &noise, Bind::Frozen).unwrap();
            for step in 0..=3 {
                let (full, simplified) = nets.kl_full_vs_simplified(&filter, step).unwrap();
                if full != simplified {
                    exact_ok = false;
                    exact_detail =
                        format!("init {init} step {step}: full {full} != simplified {simplified}");
                }
            }
        }

        // Independent draws agree with the closed form within 3 sigma.
        let step = 2;
        let single = random_window_batch(&mut rng, 1, 3, cfg.obs_dim);
        let base = FilterNoise::sample(&mut rng, 4, 1, &cfg);
        let n = 2_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut closed = 0.0;
        for _ in 0..n {
            let mut noise = base.clone();
            let fresh = FilterNoise::sample(&mut rng, 4, 1, &cfg);
            noise.z1[step] = fresh.z1[step].clone();
            noise.z2[step] = fresh.z2[step].clone();
            let tape = Tape::new();
            let filter = nets.infer_filter(&tape, &single, &noise, Bind::Frozen).unwrap();
            let (full, _) = nets.kl_full_vs_simplified(&filter, step).unwrap();
            sum += full;
            sumsq += full * full;
            closed = nets.kl_closed_form(&filter, step);
        }
        let mean = sum / n as f64;
        let se = ((sumsq / n as f64 - mean * mean).max(0.0) / n as f64).sqrt();
        if (mean - closed).abs() > 3.0 * se.max(1e-9) {
            stat_ok = false;
            stat_detail = format!("init {init}: mc {mean:.5} vs closed {closed:.5} (se {se:.5})");
        }
    }

    vec![
        PropertyResult::new(
            "full_equals_simplified_under_shared_z2",
            exact_ok,
            if exact_ok { format!("exact over {inits} inits") } else { exact_detail },
        ),
        PropertyResult::new(
            "full_matches_closed_form_under_independent_draws",
            stat_ok,
            if stat_ok { format!("within 3 sigma over {inits} inits") } else { stat_detail },
        ),
    ]
}

/// Window-boundary, capacity, uniformity, and checkpoint round-trip checks.
pub fn replay_suite() -> Vec<PropertyResult> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(777);

    // Boundary + round-trip over random traces.
    {
        let mut ok = true;
        let mut detail = String::new();
        'outer: for trial in 0..50 {
            let mut buf = ReplayBuffer::new(64, 2, 1);
            let episodes = rng.random_range(1..6);
            for e in 0..episodes {
                let len = rng.random_range(1..15);
                buf.begin_episode(vec![e as f64, 0.0]);
                for t in 0..len {
                    buf.append_step(
                        vec![t as f64],
                        0.0,
                        vec![e as f64, (t + 1) as f64],
                        t + 1 == len,
                        false,
                    )
                    .unwrap();
                }
            }
            let windows = buf.sample_windows(32, 4, &mut rng).unwrap();
            for w in windows {
                let tags: Vec<f64> = w
                    .obs
                    .iter()
                    .zip(&w.valid_mask)
                    .filter(|(_, m)| **m)
                    .map(|(o, _)| o[0])
                    .collect();
                if !tags.windows(2).all(|p| p[0] == p[1]) {
                    ok = false;
                    detail = format!("trial {trial}: window spans episodes");
                    break 'outer;
                }
            }
            if buf.stored_steps() > 64 {
                ok = false;
                detail = format!("trial {trial}: capacity exceeded");
                break;
            }
        }
        out.push(PropertyResult::new(
            "windows_respect_boundaries_and_capacity",
            ok,
            if ok { "50 random traces".into() } else { detail },
        ));
    }

    // Uniformity over end positions.
    {
        let mut buf = ReplayBuffer::new(1000, 1, 1);
        for e in 0..2 {
            let len = if e == 0 { 6 } else { 10 };
            buf.begin_episode(vec![0.0]);
            for t in 0..len {
                buf.append_step(vec![0.0], (e * 100 + t) as f64, vec![0.0], t + 1 == len, false)
                    .unwrap();
            }
        }
        let draws = 50_000usize;
        let mut counts = std::collections::HashMap::new();
        for _ in 0..draws {
            let w = &buf.sample_windows(1, 2, &mut rng).unwrap()[0];
            *counts.entry(w.last_reward() as i64).or_insert(0usize) += 1;
        }
        let expected = draws as f64 / 16.0;
        let sigma = (draws as f64 * (1.0 / 16.0) * (15.0 / 16.0)).sqrt();
        let worst = counts.values().map(|c| (*c as f64 - expected).abs()).fold(0.0, f64::max);
        out.push(PropertyResult::new(
            "sampling_uniform_over_end_positions",
            counts.len() == 16 && worst <= 4.0 * sigma,
            format!("worst deviation {worst:.1} (4 sigma {:.1})", 4.0 * sigma),
        ));
    }

    // Checkpoint container round-trip.
    {
        let dir = std::env::temp_dir().join(format!("slac-verify-{}", std::process::id()));
        let _ = std::fs::create_dir_all(&dir);
        let path = dir.join("roundtrip.ckpt");
        let p = Param::new("suite/w", vec![3], vec![0.125, -7.5, 3.0e-200]);
        crate::autograd::adam_update(&p, &[0.5, -0.25, 0.0], 0.01);
        let mut group = crate::autograd::ParamGroup::new();
        group.push(p.clone());
        let mut ck = crate::checkpoint::Checkpoint::new();
        ck.insert_group(&group);
        let ok = ck.save(&path).is_ok() && {
            let q = Param::zeros("suite/w", vec![3]);
            let mut fresh = crate::autograd::ParamGroup::new();
            fresh.push(q.clone());
            crate::checkpoint::Checkpoint::load(&path)
                .and_then(|ck| ck.restore_group(&fresh))
                .is_ok()
                && q.value() == p.value()
                && q.borrow().adam_m == p.borrow().adam_m
        };
        let _ = std::fs::remove_file(&path);
        out.push(PropertyResult::new(
            "checkpoint_roundtrip_bit_exact",
            ok,
            "params + adam moments".into(),
        ));
    }
    out
}

/// Kalman and soft-VI oracle self-checks.
pub fn oracle_suite() -> Vec<PropertyResult> {
    let mut out = Vec::new();

    // Single-observation closed form.
    {
        let model = KalmanModel::new(
            nalgebra::DMatrix::from_row_slice(1, 1, &[1.0]),
            nalgebra::DMatrix::from_row_slice(1, 1, &[0.0]),
            nalgebra::DMatrix::from_row_slice(1, 1, &[1.0]),
            nalgebra::DMatrix::from_row_slice(1, 1, &[1.0]),
            nalgebra::DMatrix::from_row_slice(1, 1, &[0.0]),
            nalgebra::DMatrix::from_row_slice(1, 1, &[2.0]),
        )
        .unwrap();
        let ll = kalman_loglik(&model, &[vec![0.0]], &[]).unwrap();
        let expected = -0.5 * (4.0 * std::f64::consts::PI).ln();
        out.push(PropertyResult::new(
            "kalman_single_obs_closed_form",
            (ll - expected).abs() < 1e-12,
            format!("{ll:.10} vs {expected:.10}"),
        ));
    }

    // Similarity-transform invariance.
    {
        let base = KalmanModel::from_env_params(&LgssParams::pomdp_2d());
        let t = nalgebra::DMatrix::from_row_slice(2, 2, &[1.5, 0.2, -0.4, 2.0]);
        let t_inv = t.clone().try_inverse().unwrap();
        let transformed = KalmanModel::new(
            &t * &base.a * &t_inv,
            &t * &base.b,
            &base.c * &t_inv,
            &t * &base.q * t.transpose(),
            base.r.clone(),
            &t * &base.sigma0 * t.transpose(),
        )
        .unwrap();
        let ys = vec![vec![0.2], vec![-0.4], vec![0.6], vec![0.1]];
        let us = vec![vec![0.5], vec![-0.3], vec![0.8]];
        let a = kalman_loglik(&base, &ys, &us).unwrap();
        let b = kalman_loglik(&transformed, &ys, &us).unwrap();
        out.push(PropertyResult::new(
            "kalman_similarity_invariance",
            (a - b).abs() < 1e-8,
            format!("{a:.10} vs {b:.10}"),
        ));
    }

    // Soft VI satisfies its own backup and the alpha -> 0 limit.
    {
        let mdp = TabularMdp {
            n_states: 3,
            n_actions: 2,
            reward: vec![vec![1.0, 0.0], vec![0.5, 0.25], vec![0.0, 2.0]],
            transition: vec![
                vec![vec![0.8, 0.2, 0.0], vec![0.1, 0.6, 0.3]],
                vec![vec![0.0, 1.0, 0.0], vec![0.3, 0.3, 0.4]],
                vec![vec![0.5, 0.0, 0.5], vec![0.0, 0.1, 0.9]],
            ],
        };
        let alpha = 0.4;
        let gamma = 0.9;
        let q = tabular_soft_value_iteration(&mdp, alpha, gamma).unwrap();
        let mut fixed_point_ok = true;
        for s in 0..3 {
            for a in 0..2 {
                let ev: f64 = mdp.transition[s][a]
                    .iter()
                    .enumerate()
                    .map(|(sp, p)| p * soft_value(&q[sp], alpha))
                    .sum();
                if (q[s][a] - (mdp.reward[s][a] + gamma * ev)).abs() > 1e-8 {
                    fixed_point_ok = false;
                }
            }
        }
        out.push(PropertyResult::new(
            "soft_vi_satisfies_backup",
            fixed_point_ok,
            "pointwise to 1e-8".into(),
        ));

        let q_tiny = tabular_soft_value_iteration(&mdp, 1e-6, gamma).unwrap();
        let mut hard = vec![vec![0.0; 2]; 3];
        for _ in 0..20_000 {
            let v: Vec<f64> =
                hard.iter().map(|r| r.iter().cloned().fold(f64::MIN, f64::max)).collect();
            for s in 0..3 {
                for a in 0..2 {
                    let ev: f64 =
                        mdp.transition[s][a].iter().zip(&v).map(|(p, v)| p * v).sum();
                    hard[s][a] = mdp.reward[s][a] + gamma * ev;
                }
            }
        }
        let worst = (0..3)
            .flat_map(|s| (0..2).map(move |a| (s, a)))
            .map(|(s, a)| (q_tiny[s][a] - hard[s][a]).abs())
            .fold(0.0, f64::max);
        out.push(PropertyResult::new(
            "soft_vi_alpha_to_zero_matches_hard_vi",
            worst < 1e-4,
            format!("worst |diff| {worst:.2e}"),
        ));
    }
    out
}
