//! Reparameterizable distributions used by the model and the policy.
//!
//! Everything operates on `[batch, dim]` tensors; per-row quantities such as
//! log-densities come back as `[batch, 1]` so batch means compose directly.

use crate::autograd::{Tape, Tensor};
use crate::{Error, Result};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Multivariate normal with diagonal covariance, parameterized by tensors so
/// gradients flow into whatever produced the mean and std.
#[derive(Clone)]
pub struct DiagGaussian {
    pub mean: Tensor,
    pub std: Tensor,
}

impl DiagGaussian {
    pub fn new(mean: Tensor, std: Tensor) -> Self {
        assert_eq!(
            mean.shape(),
            std.shape(),
            "DiagGaussian: mean shape {:?} != std shape {:?}",
            mean.shape(),
            std.shape()
        );
        debug_assert!(std.value().iter().all(|s| *s > 0.0), "DiagGaussian: std must be positive");
        DiagGaussian { mean, std }
    }

    /// N(0, I) over `[batch, dim]`.
    pub fn standard(tape: &Tape, batch: usize, dim: usize) -> Self {
        DiagGaussian {
            mean: tape.leaf(vec![0.0; batch * dim], &[batch, dim]),
            std: tape.leaf(vec![1.0; batch * dim], &[batch, dim]),
        }
    }

    pub fn dim(&self) -> usize {
        *self.mean.shape().last().unwrap_or(&0)
    }

    /// Pathwise sample mean + std * noise; `noise` is standard normal.
    pub fn rsample(&self, noise: &[f64]) -> Tensor {
        assert_eq!(
            noise.len(),
            self.mean.numel(),
            "rsample: noise length {} != distribution size {}",
            noise.len(),
            self.mean.numel()
        );
        let eps = self.mean.tape().leaf(noise.to_vec(), &self.mean.shape());
        &self.mean + &self.std * &eps
    }

    /// Row-wise log N(x; mean, std), shape `[batch, 1]`.
    pub fn log_prob(&self, x: &Tensor) -> Tensor {
        assert_eq!(
            x.shape(),
            self.mean.shape(),
            "log_prob: x shape {:?} != distribution shape {:?}",
            x.shape(),
            self.mean.shape()
        );
        let z = (x - &self.mean) / &self.std;
        let per_dim = z.square().scale(0.5) + self.std.log() + self.mean.tape().scalar(0.5 * LN_2PI);
        per_dim.sum_axis(last_axis(x)).negate()
    }

    /// Closed-form KL(self || p), row-wise `[batch, 1]`:
    /// sum_i [ log(sp/sq) + (sq^2 + (mq - mp)^2) / (2 sp^2) - 1/2 ].
    pub fn kl_to(&self, p: &DiagGaussian) -> Tensor {
        assert_eq!(
            self.mean.shape(),
            p.mean.shape(),
            "kl: q shape {:?} != p shape {:?}",
            self.mean.shape(),
            p.mean.shape()
        );
        for (name, dist) in [("q", self), ("p", p)] {
            assert!(
                dist.std.value().iter().all(|s| *s > 0.0),
                "kl: non-positive std in {name}"
            );
        }
        let var_ratio = (self.std.square() + (&self.mean - &p.mean).square()) / p.std.square().scale(2.0);
        let per_dim = (&p.std.log() - &self.std.log()) + var_ratio + self.mean.tape().scalar(-0.5);
        per_dim.sum_axis(last_axis(&self.mean))
    }
}

/// KL between diagonal Gaussians, summed over dims, `[batch, 1]`.
pub fn kl_diag_gaussian(q: &DiagGaussian, p: &DiagGaussian) -> Tensor {
    q.kl_to(p)
}

fn last_axis(t: &Tensor) -> usize {
    t.shape().len().saturating_sub(1)
}

/// Squashed Gaussian: a = tanh(u), u ~ N(mean, std). Samples live strictly
/// inside (-1, 1)^d; the log-density picks up the tanh log-det-Jacobian.
#[derive(Clone)]
pub struct TanhDiagGaussian {
    pub pre_squash: DiagGaussian,
}

impl TanhDiagGaussian {
    pub fn new(pre_squash: DiagGaussian) -> Self {
        TanhDiagGaussian { pre_squash }
    }

    /// Sample the squashed action; returns (action, pre-squash u, log_prob).
    /// Log-density is evaluated at the stored u, never by inverting tanh.
    pub fn rsample_with_log_prob(&self, noise: &[f64]) -> (Tensor, Tensor, Tensor) {
        let u = self.pre_squash.rsample(noise);
        let action = u.tanh();
        let log_prob = self.log_prob_pre(&u);
        (action, u, log_prob)
    }

    /// Squashed mean, for deterministic diagnostics.
    pub fn mean_action(&self) -> Tensor {
        self.pre_squash.mean.tanh()
    }

    /// log pi at a = tanh(u) given the pre-squash u, `[batch, 1]`:
    /// log N(u) - sum_i log(1 - tanh(u_i)^2), with the log-det term computed
    /// via the stable form 2 (log 2 - u - softplus(-2u)).
    pub fn log_prob_pre(&self, u: &Tensor) -> Tensor {
        let gauss = self.pre_squash.log_prob(u);
        let tape = u.tape();
        let ldj_per_dim =
            (tape.scalar(std::f64::consts::LN_2) - u - u.scale(-2.0).softplus()).scale(2.0);
        gauss - ldj_per_dim.sum_axis(last_axis(u))
    }

    /// log pi at an action strictly inside (-1, 1)^d, recovering u = atanh(a).
    /// Only for evaluation at externally supplied actions (quadrature tests);
    /// sampled actions must use [`log_prob_pre`](Self::log_prob_pre).
    pub fn log_prob_action(&self, action: &[f64]) -> Result<Tensor> {
        if action.iter().any(|a| a.abs() >= 1.0) {
            return Err(Error::Validation(
                "tanh log_prob: action components must be strictly inside (-1, 1)".into(),
            ));
        }
        let u: Vec<f64> = action.iter().map(|a| a.atanh()).collect();
        let u = self.pre_squash.mean.tape().leaf(u, &self.pre_squash.mean.shape());
        Ok(self.log_prob_pre(&u))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "a={a} b={b} |diff|={}", (a - b).abs());
    }

    #[test]
    fn rsample_identity_and_hand_examples() {
        let tape = Tape::new();
        let d = DiagGaussian::new(tape.leaf(vec![0.0], &[1, 1]), tape.leaf(vec![1.0], &[1, 1]));
        assert_eq!(d.rsample(&[0.0]).value(), vec![0.0]);

        let d = DiagGaussian::new(
            tape.leaf(vec![1.0, 2.0], &[1, 2]),
            tape.leaf(vec![0.5, 2.0], &[1, 2]),
        );
        assert_eq!(d.rsample(&[1.0, -1.0]).value(), vec![1.5, 0.0]);
    }

    #[test]
    fn rsample_monte_carlo_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000usize;
        let tape = Tape::new();
        let d = DiagGaussian::new(tape.leaf(vec![3.0], &[1, 1]), tape.leaf(vec![2.0], &[1, 1]));
        let mut sum = 0.0;
        for _ in 0..n {
            let e: f64 = rng.sample(StandardNormal);
            sum += d.rsample(&[e]).value()[0];
        }
        let mean = sum / n as f64;
        let tol = 3.0 * 2.0 / (n as f64).sqrt();
        assert_close(mean, 3.0, tol);
    }

    #[test]
    fn rsample_gradients_match_finite_differences() {
        // Pathwise map psi = mean + std * eps with fixed eps draws.
        let eps = [0.7, -1.3, 0.2];
        let err = grad_check(
            move |tape, p| {
                let mean = p.slice_axis(0, 0, 3).reshape(&[1, 3]);
                let std = p.slice_axis(0, 3, 3).reshape(&[1, 3]);
                let d = DiagGaussian::new(mean, std);
                let tgt = tape.leaf(vec![0.3, -0.6, 0.9], &[1, 3]);
                (d.rsample(&eps) - tgt).square().sum()
            },
            &[0.1, -0.2, 0.4, 0.8, 1.2, 0.5],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rsample rel err {err}");
    }

    #[test]
    fn kl_identical_is_zero() {
        let tape = Tape::new();
        let q = DiagGaussian::new(
            tape.leaf(vec![0.3, -0.7], &[1, 2]),
            tape.leaf(vec![0.9, 1.4], &[1, 2]),
        );
        let kl = kl_diag_gaussian(&q, &q.clone());
        assert!(kl.value()[0].abs() < 1e-15);
    }

    #[test]
    fn kl_hand_values() {
        let tape = Tape::new();
        // q = N(1, 1), p = N(0, 1): KL = mu^2 / 2 = 0.5.
        let q = DiagGaussian::new(tape.leaf(vec![1.0], &[1, 1]), tape.leaf(vec![1.0], &[1, 1]));
        let p = DiagGaussian::standard(&tape, 1, 1);
        assert_close(kl_diag_gaussian(&q, &p).value()[0], 0.5, 1e-15);

        // q = N(0, 2^2), p = N(0, 1): log(1/2) + 4/2 - 1/2.
        let q = DiagGaussian::new(tape.leaf(vec![0.0], &[1, 1]), tape.leaf(vec![2.0], &[1, 1]));
        let expected = (0.5f64).ln() + 2.0 - 0.5;
        assert_close(expected, 0.8068528194400547, 1e-12);
        assert_close(kl_diag_gaussian(&q, &p).value()[0], expected, 1e-12);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        // KL(q||p) = E_q[log q - log p], estimated with 1e5 draws.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000usize;
        let (mq, sq, mp, sp) = (0.0f64, 2.0f64, 0.0f64, 1.0f64);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let e: f64 = rng.sample(StandardNormal);
            let x = mq + sq * e;
            let lq = -0.5 * ((x - mq) / sq).powi(2) - sq.ln() - 0.5 * LN_2PI;
            let lp = -0.5 * ((x - mp) / sp).powi(2) - sp.ln() - 0.5 * LN_2PI;
            let v = lq - lp;
            sum += v;
            sumsq += v * v;
        }
        let mc = sum / n as f64;
        let se = ((sumsq / n as f64 - mc * mc) / n as f64).sqrt();

        let tape = Tape::new();
        let q = DiagGaussian::new(tape.leaf(vec![mq], &[1, 1]), tape.leaf(vec![sq], &[1, 1]));
        let p = DiagGaussian::new(tape.leaf(vec![mp], &[1, 1]), tape.leaf(vec![sp], &[1, 1]));
        let closed = kl_diag_gaussian(&q, &p).value()[0];
        assert!((closed - mc).abs() <= 3.0 * se, "closed {closed} mc {mc} se {se}");
    }

    #[test]
    #[should_panic(expected = "non-positive std")]
    fn kl_rejects_non_positive_std() {
        let tape = Tape::new();
        let q = DiagGaussian {
            mean: tape.leaf(vec![0.0], &[1, 1]),
            std: tape.leaf(vec![0.0], &[1, 1]),
        };
        let p = DiagGaussian::standard(&tape, 1, 1);
        let _ = kl_diag_gaussian(&q, &p);
    }

    #[test]
    fn log_prob_of_mean_is_normalizer() {
        let tape = Tape::new();
        let std = vec![0.5, 1.5, 2.0];
        let d = DiagGaussian::new(tape.leaf(vec![0.1, 0.2, 0.3], &[1, 3]), tape.leaf(std.clone(), &[1, 3]));
        let lp = d.log_prob(&d.mean.clone()).value()[0];
        let expected: f64 = -std.iter().map(|s| s.ln() + 0.5 * LN_2PI).sum::<f64>();
        assert_close(lp, expected, 1e-14);
    }

    #[test]
    fn tanh_log_prob_hand_values() {
        let tape = Tape::new();
        let d = TanhDiagGaussian::new(DiagGaussian::standard(&tape, 1, 1));

        // u = 0, a = 0: log N(0;0,1) = -1/2 log 2pi; log-det term is 0.
        let u0 = tape.leaf(vec![0.0], &[1, 1]);
        assert_close(d.log_prob_pre(&u0).value()[0], -0.5 * LN_2PI, 1e-12);

        // u = 1: log N(1;0,1) - log(1 - tanh(1)^2), frozen via the numeric oracle.
        let u1 = tape.leaf(vec![1.0], &[1, 1]);
        let oracle = -0.5 - 0.5 * LN_2PI - (1.0 - 1.0f64.tanh().powi(2)).ln();
        assert_close(oracle, -0.5513768722386184, 1e-12);
        assert_close(d.log_prob_pre(&u1).value()[0], oracle, 1e-12);

        // Via the action with atanh recovery.
        let lp = d.log_prob_action(&[1.0f64.tanh()]).unwrap().value()[0];
        assert_close(lp, oracle, 1e-9);
    }

    #[test]
    fn tanh_log_prob_factorizes_over_dims() {
        let tape = Tape::new();
        let mean = vec![0.2, -0.4, 0.6];
        let std = vec![0.8, 1.1, 0.5];
        let us = vec![0.3, -0.9, 1.4];
        let joint = TanhDiagGaussian::new(DiagGaussian::new(
            tape.leaf(mean.clone(), &[1, 3]),
            tape.leaf(std.clone(), &[1, 3]),
        ));
        let u = tape.leaf(us.clone(), &[1, 3]);
        let lp_joint = joint.log_prob_pre(&u).value()[0];

        let mut lp_sum = 0.0;
        for i in 0..3 {
            let d = TanhDiagGaussian::new(DiagGaussian::new(
                tape.leaf(vec![mean[i]], &[1, 1]),
                tape.leaf(vec![std[i]], &[1, 1]),
            ));
            lp_sum += d.log_prob_pre(&tape.leaf(vec![us[i]], &[1, 1])).value()[0];
        }
        assert_close(lp_joint, lp_sum, 1e-12);
    }

    #[test]
    fn tanh_log_prob_rejects_boundary_actions() {
        let tape = Tape::new();
        let d = TanhDiagGaussian::new(DiagGaussian::standard(&tape, 1, 1));
        assert!(d.log_prob_action(&[1.0]).is_err());
        assert!(d.log_prob_action(&[-1.0000001]).is_err());
    }

    #[test]
    fn tanh_density_integrates_to_one() {
        // Midpoint quadrature of exp(log_prob) over (-1, 1).
        let tape = Tape::new();
        let d = TanhDiagGaussian::new(DiagGaussian::new(
            tape.leaf(vec![0.4], &[1, 1]),
            tape.leaf(vec![0.9], &[1, 1]),
        ));
        let n = 20_000usize;
        let hstep = 2.0 / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            let a = -1.0 + (i as f64 + 0.5) * hstep;
            total += d.log_prob_action(&[a]).unwrap().value()[0].exp() * hstep;
        }
        assert_close(total, 1.0, 1e-3);
    }

    proptest::proptest! {
        #[test]
        fn kl_non_negative_equality_iff_equal(
            mq in -3.0f64..3.0, sq in 0.05f64..3.0,
            mp in -3.0f64..3.0, sp in 0.05f64..3.0,
        ) {
            let tape = Tape::new();
            let q = DiagGaussian::new(tape.leaf(vec![mq], &[1, 1]), tape.leaf(vec![sq], &[1, 1]));
            let p = DiagGaussian::new(tape.leaf(vec![mp], &[1, 1]), tape.leaf(vec![sp], &[1, 1]));
            let kl = kl_diag_gaussian(&q, &p).value()[0];
            proptest::prop_assert!(kl >= -1e-12, "kl = {}", kl);
            if (mq - mp).abs() > 1e-3 || (sq - sp).abs() > 1e-3 {
                proptest::prop_assert!(kl > 0.0);
            }
            let kl_self = kl_diag_gaussian(&q, &q.clone()).value()[0];
            proptest::prop_assert!(kl_self.abs() < 1e-12);
        }
    }

    #[test]
    fn samples_stay_inside_open_hypercube() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let tape = Tape::new();
        let d = TanhDiagGaussian::new(DiagGaussian::new(
            tape.leaf(vec![0.0, 0.0], &[1, 2]),
            tape.leaf(vec![5.0, 5.0], &[1, 2]),
        ));
        for _ in 0..1000 {
            let noise: Vec<f64> = (0..2).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let (a, _, _) = d.rsample_with_log_prob(&noise);
            assert!(a.value().iter().all(|v| v.abs() < 1.0));
        }
    }
}
