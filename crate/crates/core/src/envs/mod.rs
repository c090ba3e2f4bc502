//! Desk-scale POMDP environments with a uniform reset/step interface.
//!
//! Actions arrive in [-1, 1]^dim and are rescaled internally. One agent step
//! applies the action for `action_repeat` inner steps and sums the inner
//! rewards. Time-limit terminations are reported distinctly from failures so
//! the critic can bootstrap through them.

mod image;
mod lgss;
mod pendulum;

pub use image::ImageObsEnv;
pub use lgss::{LgssEnv, LgssParams};
pub use pendulum::PartialPendulumEnv;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminalKind {
    None,
    /// Episode ended by the step limit; the critic bootstraps through.
    TimeLimit,
    /// Episode ended by failure; blocks bootstrapping.
    Failure,
}

impl TerminalKind {
    pub fn is_terminal(self) -> bool {
        self != TerminalKind::None
    }

    pub fn blocks_bootstrap(self) -> bool {
        self == TerminalKind::Failure
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub reward: f64,
    pub obs: Vec<f64>,
    pub terminal: TerminalKind,
}

#[derive(Debug, Clone)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub max_episode_steps: usize,
    pub action_repeat: usize,
    pub terminates_on_failure: bool,
}

pub trait Environment {
    fn spec(&self) -> &EnvSpec;

    /// Start a fresh episode and return x_1.
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64>;

    /// Apply `action` for `action_repeat` inner steps. Errors if called on a
    /// terminated episode or with out-of-range actions.
    fn step(&mut self, action: &[f64], rng: &mut ChaCha8Rng) -> Result<StepOutcome>;

    /// Full simulator state for checkpoint/resume.
    fn state_vec(&self) -> Vec<f64>;
    fn restore_state(&mut self, state: &[f64]);

    /// 16x16 grayscale rendering of the current state, if supported.
    fn render_tiny(&self) -> Option<Vec<f64>> {
        None
    }
}

pub(crate) fn validate_action(spec: &EnvSpec, action: &[f64]) -> Result<()> {
    if action.len() != spec.action_dim {
        return Err(Error::Validation(format!(
            "action dim {} != expected {}",
            action.len(),
            spec.action_dim
        )));
    }
    if action.iter().any(|a| a.abs() > 1.0 + 1e-12) {
        return Err(Error::Validation("action components must lie in [-1, 1]".into()));
    }
    Ok(())
}

/// Serializable environment selection for run configs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    /// One of "pendulum", "lgss_lqr", "lgss_pomdp".
    pub kind: String,
    #[serde(default = "default_repeat")]
    pub action_repeat: usize,
    /// Pendulum only: observe angular velocity too.
    #[serde(default)]
    pub full_state: bool,
    /// Wrap observations as 16x16 grayscale renderings.
    #[serde(default)]
    pub image_obs: bool,
    #[serde(default)]
    pub max_episode_steps: Option<usize>,
    /// Scales every noise source (including reset randomness); 0 makes the
    /// environment fully deterministic for diagnostics.
    #[serde(default)]
    pub noise_scale: Option<f64>,
}

fn default_repeat() -> usize {
    1
}

impl EnvConfig {
    pub fn pendulum() -> Self {
        EnvConfig {
            kind: "pendulum".into(),
            action_repeat: 1,
            full_state: false,
            image_obs: false,
            max_episode_steps: None,
            noise_scale: None,
        }
    }

    pub fn lgss_lqr() -> Self {
        EnvConfig {
            kind: "lgss_lqr".into(),
            action_repeat: 1,
            full_state: true,
            image_obs: false,
            max_episode_steps: None,
            noise_scale: None,
        }
    }

    pub fn lgss_pomdp() -> Self {
        EnvConfig {
            kind: "lgss_pomdp".into(),
            action_repeat: 1,
            full_state: false,
            image_obs: false,
            max_episode_steps: None,
            noise_scale: None,
        }
    }

    pub fn build(&self) -> Result<Box<dyn Environment>> {
        let noise = self.noise_scale.unwrap_or(1.0);
        let base: Box<dyn Environment> = match self.kind.as_str() {
            "pendulum" => {
                let mut env = PartialPendulumEnv::new(
                    self.full_state,
                    self.action_repeat,
                    self.max_episode_steps.unwrap_or(200),
                );
                env.reset_angle_range *= noise;
                env.reset_vel_range *= noise;
                Box::new(env)
            }
            "lgss_lqr" => Box::new(LgssEnv::new(
                LgssParams::lqr_2d().scale_noise(noise),
                self.action_repeat,
                self.max_episode_steps.unwrap_or(50),
            )),
            "lgss_pomdp" => Box::new(LgssEnv::new(
                LgssParams::pomdp_2d().scale_noise(noise),
                self.action_repeat,
                self.max_episode_steps.unwrap_or(50),
            )),
            other => {
                return Err(Error::Validation(format!(
                    "unknown env kind {other:?} (expected pendulum, lgss_lqr, or lgss_pomdp)"
                )))
            }
        };
        Ok(if self.image_obs { Box::new(ImageObsEnv::new(base)) } else { base })
    }
}
