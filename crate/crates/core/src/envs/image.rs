//! Tiny-image observation wrapper: replaces vector observations with the
//! wrapped environment's 16x16 grayscale rendering (flattened, 256 values in
//! [0, 1]). Exercises the conv encoder/decoder path.

use rand_chacha::ChaCha8Rng;

use super::{EnvSpec, Environment, StepOutcome};
use crate::Result;

pub struct ImageObsEnv {
    inner: Box<dyn Environment>,
    spec: EnvSpec,
}

impl ImageObsEnv {
    pub fn new(inner: Box<dyn Environment>) -> Self {
        assert!(inner.render_tiny().is_some(), "wrapped env does not support rendering");
        let mut spec = inner.spec().clone();
        spec.obs_dim = 256;
        ImageObsEnv { inner, spec }
    }

    fn render(&self) -> Vec<f64> {
        self.inner.render_tiny().expect("checked at construction")
    }
}

impl Environment for ImageObsEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.inner.reset(rng);
        self.render()
    }

    fn step(&mut self, action: &[f64], rng: &mut ChaCha8Rng) -> Result<StepOutcome> {
        let out = self.inner.step(action, rng)?;
        Ok(StepOutcome { reward: out.reward, obs: self.render(), terminal: out.terminal })
    }

    fn state_vec(&self) -> Vec<f64> {
        self.inner.state_vec()
    }

    fn restore_state(&mut self, state: &[f64]) {
        self.inner.restore_state(state);
    }

    fn render_tiny(&self) -> Option<Vec<f64>> {
        Some(self.render())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvConfig;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn wraps_pendulum_with_256_dim_observations() {
        let cfg = EnvConfig { image_obs: true, ..EnvConfig::pendulum() };
        let mut env = cfg.build().unwrap();
        assert_eq!(env.spec().obs_dim, 256);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let obs = env.reset(&mut rng);
        assert_eq!(obs.len(), 256);
        assert!(obs.iter().all(|v| (0.0..=1.0).contains(v)));
        // The rod lights up some pixels.
        assert!(obs.iter().any(|v| *v > 0.5));
        let out = env.step(&[0.5], &mut rng).unwrap();
        assert_eq!(out.obs.len(), 256);
    }

    #[test]
    fn rendering_tracks_state() {
        let cfg = EnvConfig { image_obs: true, ..EnvConfig::lgss_pomdp() };
        let mut env = cfg.build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = env.reset(&mut rng);
        for _ in 0..5 {
            env.step(&[1.0], &mut rng).unwrap();
        }
        let b = env.render_tiny().unwrap();
        assert_ne!(a, b);
    }
}
