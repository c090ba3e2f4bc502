//! Linear-Gaussian state-space environment.
//!
//! x_{t+1} = A x_t + B u_t + w,  w ~ N(0, Q)
//! y_t     = C x_t + v,          v ~ N(0, R)
//! reward  = -(x^T S x + u^T T u) per inner step, u = action_scale * a.
//!
//! Dynamics are exactly linear-Gaussian so the Kalman oracle applies.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{validate_action, EnvSpec, Environment, StepOutcome, TerminalKind};
use crate::Result;

#[derive(Debug, Clone)]
pub struct LgssParams {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    /// Process noise covariance.
    pub q: DMatrix<f64>,
    /// Observation noise covariance.
    pub r: DMatrix<f64>,
    /// Initial state covariance.
    pub sigma0: DMatrix<f64>,
    /// State cost weights (diagonal of S).
    pub s_cost: DVector<f64>,
    /// Control cost weights (diagonal of T).
    pub t_cost: DVector<f64>,
    pub action_scale: f64,
}

impl LgssParams {
    /// Fully observed damped double-integrator used for the SAC-mode LQR
    /// runs. Strictly stable, so even random policies keep costs bounded.
    pub fn lqr_2d() -> Self {
        LgssParams {
            a: DMatrix::from_row_slice(2, 2, &[0.98, 0.2, 0.0, 0.9]),
            b: DMatrix::from_row_slice(2, 1, &[0.0, 0.5]),
            c: DMatrix::identity(2, 2),
            q: DMatrix::from_diagonal(&DVector::from_row_slice(&[1e-4, 4e-4])),
            r: DMatrix::zeros(2, 2),
            sigma0: DMatrix::from_diagonal(&DVector::from_row_slice(&[0.25, 0.1])),
            s_cost: DVector::from_row_slice(&[1.0, 0.1]),
            t_cost: DVector::from_row_slice(&[0.01]),
            action_scale: 1.0,
        }
    }

    /// Partially observed rotation with 1-D noisy observations; the latent
    /// model's verification environment.
    pub fn pomdp_2d() -> Self {
        let (cs, sn) = (0.3f64.cos(), 0.3f64.sin());
        LgssParams {
            a: DMatrix::from_row_slice(2, 2, &[0.98 * cs, -0.98 * sn, 0.98 * sn, 0.98 * cs]),
            b: DMatrix::from_row_slice(2, 1, &[0.3, 0.1]),
            c: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            q: DMatrix::from_diagonal(&DVector::from_row_slice(&[0.0025, 0.0025])),
            r: DMatrix::from_diagonal(&DVector::from_row_slice(&[0.01])),
            sigma0: DMatrix::from_diagonal(&DVector::from_row_slice(&[0.09, 0.09])),
            s_cost: DVector::from_row_slice(&[1.0, 1.0]),
            t_cost: DVector::from_row_slice(&[0.01]),
            action_scale: 1.0,
        }
    }

    /// Multiply all covariances by scale^2 (0 removes every noise source).
    pub fn scale_noise(mut self, scale: f64) -> Self {
        let s2 = scale * scale;
        self.q *= s2;
        self.r *= s2;
        self.sigma0 *= s2;
        self
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.b.ncols()
    }
}

fn chol_or_zero(m: &DMatrix<f64>) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    if m.iter().all(|v| *v == 0.0) {
        None
    } else {
        Some(m.clone().cholesky().expect("covariance must be PSD"))
    }
}

pub struct LgssEnv {
    params: LgssParams,
    spec: EnvSpec,
    q_chol: Option<Cholesky<f64, nalgebra::Dyn>>,
    r_chol: Option<Cholesky<f64, nalgebra::Dyn>>,
    sigma0_chol: Option<Cholesky<f64, nalgebra::Dyn>>,
    state: DVector<f64>,
    steps_taken: usize,
    terminal: bool,
}

impl LgssEnv {
    pub fn new(params: LgssParams, action_repeat: usize, max_episode_steps: usize) -> Self {
        assert!(action_repeat >= 1);
        let spec = EnvSpec {
            obs_dim: params.obs_dim(),
            action_dim: params.action_dim(),
            max_episode_steps,
            action_repeat,
            terminates_on_failure: false,
        };
        let q_chol = chol_or_zero(&params.q);
        let r_chol = chol_or_zero(&params.r);
        let sigma0_chol = chol_or_zero(&params.sigma0);
        let n = params.state_dim();
        LgssEnv {
            params,
            spec,
            q_chol,
            r_chol,
            sigma0_chol,
            state: DVector::zeros(n),
            steps_taken: 0,
            terminal: true,
        }
    }

    pub fn params(&self) -> &LgssParams {
        &self.params
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.state
    }

    fn gaussian(
        &self,
        chol: &Option<Cholesky<f64, nalgebra::Dyn>>,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> DVector<f64> {
        // Standard normals are always drawn so the rng stream does not depend
        // on whether the covariance is zero.
        let eps = DVector::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
        match chol {
            Some(c) => c.l() * eps,
            None => DVector::zeros(dim),
        }
    }

    fn observe(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let v = self.gaussian(&self.r_chol, self.params.obs_dim(), rng);
        (&self.params.c * &self.state + v).iter().copied().collect()
    }
}

impl Environment for LgssEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.state = self.gaussian(&self.sigma0_chol, self.params.state_dim(), rng);
        self.steps_taken = 0;
        self.terminal = false;
        self.observe(rng)
    }

    fn step(&mut self, action: &[f64], rng: &mut ChaCha8Rng) -> Result<StepOutcome> {
        if self.terminal {
            return Err(crate::Error::Validation("step on a terminated episode".into()));
        }
        validate_action(&self.spec, action)?;
        let u = DVector::from_iterator(
            action.len(),
            action.iter().map(|a| a * self.params.action_scale),
        );
        let mut reward = 0.0;
        for _ in 0..self.spec.action_repeat {
            let cost_x: f64 = self
                .state
                .iter()
                .zip(self.params.s_cost.iter())
                .map(|(x, s)| s * x * x)
                .sum();
            let cost_u: f64 = u.iter().zip(self.params.t_cost.iter()).map(|(a, t)| t * a * a).sum();
            reward -= cost_x + cost_u;
            let w = self.gaussian(&self.q_chol, self.params.state_dim(), rng);
            self.state = &self.params.a * &self.state + &self.params.b * &u + w;
        }
        self.steps_taken += 1;
        let terminal = if self.steps_taken >= self.spec.max_episode_steps {
            self.terminal = true;
            TerminalKind::TimeLimit
        } else {
            TerminalKind::None
        };
        Ok(StepOutcome { reward, obs: self.observe(rng), terminal })
    }

    fn state_vec(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.state.iter().copied().collect();
        v.push(self.steps_taken as f64);
        v.push(if self.terminal { 1.0 } else { 0.0 });
        v
    }

    fn restore_state(&mut self, state: &[f64]) {
        let n = self.params.state_dim();
        assert_eq!(state.len(), n + 2, "lgss restore_state length mismatch");
        self.state = DVector::from_column_slice(&state[..n]);
        self.steps_taken = state[n] as usize;
        self.terminal = state[n + 1] != 0.0;
    }

    fn render_tiny(&self) -> Option<Vec<f64>> {
        // Gaussian blob centered at the (first two) state coordinates,
        // mapped from [-3, 3]^2 onto the 16x16 grid.
        let px = |v: f64| (v.clamp(-3.0, 3.0) + 3.0) / 6.0 * 15.0;
        let cx = px(self.state[0]);
        let cy = px(if self.state.len() > 1 { self.state[1] } else { 0.0 });
        let mut img = vec![0.0; 256];
        for y in 0..16 {
            for x in 0..16 {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                img[y * 16 + x] = (-d2 / 2.0).exp();
            }
        }
        Some(img)
    }
}
