//! Torque-limited pendulum swing-up with hidden angular velocity.
//!
//! Semi-implicit Euler at dt = 0.05; angle theta measured from upright.
//! Observation is (cos theta, sin theta) — velocity is hidden unless
//! `full_state` — so optimal behavior requires memory.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{validate_action, EnvSpec, Environment, StepOutcome, TerminalKind};
use crate::Result;

pub const GRAVITY: f64 = 10.0;
pub const MASS: f64 = 1.0;
pub const LENGTH: f64 = 1.0;
pub const DT: f64 = 0.05;
pub const MAX_TORQUE: f64 = 2.0;
pub const MAX_SPEED: f64 = 8.0;

pub struct PartialPendulumEnv {
    spec: EnvSpec,
    full_state: bool,
    theta: f64,
    theta_dot: f64,
    steps_taken: usize,
    terminal: bool,
    /// Reset ranges: theta ~ U(-reset_angle, reset_angle), similarly velocity.
    pub reset_angle_range: f64,
    pub reset_vel_range: f64,
}

fn angle_normalize(x: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let r = (x + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    r
}

impl PartialPendulumEnv {
    pub fn new(full_state: bool, action_repeat: usize, max_episode_steps: usize) -> Self {
        assert!(action_repeat >= 1);
        PartialPendulumEnv {
            spec: EnvSpec {
                obs_dim: if full_state { 3 } else { 2 },
                action_dim: 1,
                max_episode_steps,
                action_repeat,
                terminates_on_failure: false,
            },
            full_state,
            theta: 0.0,
            theta_dot: 0.0,
            steps_taken: 0,
            terminal: true,
            reset_angle_range: std::f64::consts::PI,
            reset_vel_range: 1.0,
        }
    }

    fn observe(&self) -> Vec<f64> {
        let mut obs = vec![self.theta.cos(), self.theta.sin()];
        if self.full_state {
            obs.push(self.theta_dot);
        }
        obs
    }

    /// One semi-implicit Euler inner step; returns the inner reward.
    fn inner_step(&mut self, torque: f64) -> f64 {
        let th = angle_normalize(self.theta);
        let reward = -(th * th + 0.1 * self.theta_dot * self.theta_dot + 0.001 * torque * torque);
        let acc = 3.0 * GRAVITY / (2.0 * LENGTH) * self.theta.sin()
            + 3.0 / (MASS * LENGTH * LENGTH) * torque;
        self.theta_dot = (self.theta_dot + acc * DT).clamp(-MAX_SPEED, MAX_SPEED);
        self.theta += self.theta_dot * DT;
        reward
    }

    pub fn angle(&self) -> f64 {
        self.theta
    }

    pub fn velocity(&self) -> f64 {
        self.theta_dot
    }

    /// Mechanical energy of the free rod (kinetic + potential), used by the
    /// integrator drift check.
    pub fn energy(&self) -> f64 {
        let inertia = MASS * LENGTH * LENGTH / 3.0;
        0.5 * inertia * self.theta_dot * self.theta_dot
            + MASS * GRAVITY * (LENGTH / 2.0) * self.theta.cos()
    }

    pub fn set_state(&mut self, theta: f64, theta_dot: f64) {
        self.theta = theta;
        self.theta_dot = theta_dot;
        self.terminal = false;
    }
}

impl Environment for PartialPendulumEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.theta = rng.random_range(-self.reset_angle_range..self.reset_angle_range);
        self.theta_dot = rng.random_range(-self.reset_vel_range..self.reset_vel_range);
        self.steps_taken = 0;
        self.terminal = false;
        self.observe()
    }

    fn step(&mut self, action: &[f64], _rng: &mut ChaCha8Rng) -> Result<StepOutcome> {
        if self.terminal {
            return Err(crate::Error::Validation("step on a terminated episode".into()));
        }
        validate_action(&self.spec, action)?;
        let torque = action[0] * MAX_TORQUE;
        let mut reward = 0.0;
        for _ in 0..self.spec.action_repeat {
            reward += self.inner_step(torque);
        }
        self.steps_taken += 1;
        let terminal = if self.steps_taken >= self.spec.max_episode_steps {
            self.terminal = true;
            TerminalKind::TimeLimit
        } else {
            TerminalKind::None
        };
        Ok(StepOutcome { reward, obs: self.observe(), terminal })
    }

    fn state_vec(&self) -> Vec<f64> {
        vec![
            self.theta,
            self.theta_dot,
            self.steps_taken as f64,
            if self.terminal { 1.0 } else { 0.0 },
        ]
    }

    fn restore_state(&mut self, state: &[f64]) {
        assert_eq!(state.len(), 4, "pendulum restore_state length mismatch");
        self.theta = state[0];
        self.theta_dot = state[1];
        self.steps_taken = state[2] as usize;
        self.terminal = state[3] != 0.0;
    }

    fn render_tiny(&self) -> Option<Vec<f64>> {
        // Rod from the center to the bob, drawn by distance to the segment.
        let mut img = vec![0.0; 256];
        let (cx, cy) = (7.5, 7.5);
        let (bx, by) = (cx + 6.0 * self.theta.sin(), cy - 6.0 * self.theta.cos());
        for y in 0..16 {
            for x in 0..16 {
                let (px, py) = (x as f64, y as f64);
                let (dx, dy) = (bx - cx, by - cy);
                let t = (((px - cx) * dx + (py - cy) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
                let (qx, qy) = (cx + t * dx, cy + t * dy);
                let d2 = (px - qx).powi(2) + (py - qy).powi(2);
                img[y * 16 + x] = (-d2 / 1.5).exp();
            }
        }
        Some(img)
    }
}
