//! Ground-truth references used only by tests and acceptance runs: exact
//! Kalman filtering / log-likelihood for linear-Gaussian systems, and exact
//! soft value iteration on tiny tabular MDPs.

use nalgebra::{DMatrix, DVector};

use crate::envs::LgssParams;
use crate::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// Linear-Gaussian state-space system matching an `LgssEnv`:
/// x_{t+1} = A x_t + B u_t + w, y_t = C x_t + v, x_1 ~ N(0, Sigma0).
#[derive(Debug, Clone)]
pub struct KalmanModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub sigma0: DMatrix<f64>,
}

impl KalmanModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        sigma0: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || q.nrows() != n || q.ncols() != n || sigma0.nrows() != n {
            return Err(Error::Validation("A, Q, Sigma0 must be square and consistent".into()));
        }
        if b.nrows() != n {
            return Err(Error::Validation("B must have n_state rows".into()));
        }
        let m = c.nrows();
        if c.ncols() != n || r.nrows() != m || r.ncols() != m {
            return Err(Error::Validation("C, R dimensions inconsistent".into()));
        }
        Ok(KalmanModel { a, b, c, q, r, sigma0 })
    }

    pub fn from_env_params(p: &LgssParams) -> Self {
        KalmanModel {
            a: p.a.clone(),
            b: p.b.clone(),
            c: p.c.clone(),
            q: p.q.clone(),
            r: p.r.clone(),
            sigma0: p.sigma0.clone(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.c.nrows()
    }
}

/// Per-step filter output: prior and posterior moments for each observation.
#[derive(Debug, Clone)]
pub struct KalmanFilterResult {
    pub log_likelihood: f64,
    pub predicted_means: Vec<DVector<f64>>,
    pub predicted_covs: Vec<DMatrix<f64>>,
    pub filtered_means: Vec<DVector<f64>>,
    pub filtered_covs: Vec<DMatrix<f64>>,
}

fn symmetrize(p: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (p + p.transpose())
}

/// Exact log p(y_{1:T} | u_{1:T-1}) by prediction-error decomposition.
/// `actions[t]` is the (already rescaled) control applied between y_{t+1}
/// and y_{t+2}; pass one fewer action than observations.
pub fn kalman_loglik(model: &KalmanModel, observations: &[Vec<f64>], actions: &[Vec<f64>]) -> Result<f64> {
    Ok(kalman_filter(model, observations, actions)?.log_likelihood)
}

/// Standard predict/update recursion with a Joseph-form covariance update;
/// covariances are symmetrized each step.
pub fn kalman_filter(
    model: &KalmanModel,
    observations: &[Vec<f64>],
    actions: &[Vec<f64>],
) -> Result<KalmanFilterResult> {
    let n = model.state_dim();
    let m = model.obs_dim();
    if observations.is_empty() {
        return Err(Error::Validation("kalman_filter: no observations".into()));
    }
    if actions.len() + 1 != observations.len() {
        return Err(Error::Validation(format!(
            "kalman_filter: got {} observations and {} actions (need T-1)",
            observations.len(),
            actions.len()
        )));
    }
    for y in observations {
        if y.len() != m {
            return Err(Error::Validation("kalman_filter: observation dim mismatch".into()));
        }
    }

    let mut m_pred = DVector::zeros(n);
    let mut p_pred = model.sigma0.clone();
    let mut loglik = 0.0;
    let mut out = KalmanFilterResult {
        log_likelihood: 0.0,
        predicted_means: Vec::with_capacity(observations.len()),
        predicted_covs: Vec::with_capacity(observations.len()),
        filtered_means: Vec::with_capacity(observations.len()),
        filtered_covs: Vec::with_capacity(observations.len()),
    };

    for (t, y_raw) in observations.iter().enumerate() {
        out.predicted_means.push(m_pred.clone());
        out.predicted_covs.push(p_pred.clone());

        let y = DVector::from_column_slice(y_raw);
        let innovation = &y - &model.c * &m_pred;
        let s = symmetrize(&(&model.c * &p_pred * model.c.transpose() + &model.r));
        let chol = s.clone().cholesky().ok_or_else(|| {
            Error::Numeric(format!("kalman_filter: singular innovation covariance at t={t}"))
        })?;

        let s_inv_innov = chol.solve(&innovation);
        let quad = innovation.dot(&s_inv_innov);
        let mut logdet = 0.0;
        for i in 0..m {
            let d = chol.l()[(i, i)];
            if d <= 0.0 || !d.is_finite() {
                return Err(Error::Numeric("kalman_filter: invalid Cholesky diagonal".into()));
            }
            logdet += 2.0 * d.ln();
        }
        loglik += -0.5 * (m as f64 * LN_2PI + logdet + quad);

        // Gain K = P C^T S^{-1}.
        let pct = &p_pred * model.c.transpose();
        let k = chol.solve(&pct.transpose()).transpose();

        let m_filt = &m_pred + &k * innovation;
        let i_kh = DMatrix::<f64>::identity(n, n) - &k * &model.c;
        let p_filt = symmetrize(&(&i_kh * &p_pred * i_kh.transpose() + &k * &model.r * k.transpose()));

        out.filtered_means.push(m_filt.clone());
        out.filtered_covs.push(p_filt.clone());

        if t < actions.len() {
            let u = DVector::from_column_slice(&actions[t]);
            m_pred = &model.a * m_filt + &model.b * u;
            p_pred = symmetrize(&(&model.a * p_filt * model.a.transpose() + &model.q));
        }
    }
    out.log_likelihood = loglik;
    Ok(out)
}

/// Exact soft value iteration on a tabular MDP: the fixed point of
/// Q = r + gamma * E[V], V = alpha * logsumexp(Q / alpha) over actions.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// reward[s][a]
    pub reward: Vec<Vec<f64>>,
    /// transition[s][a][s'] = P(s' | s, a)
    pub transition: Vec<Vec<Vec<f64>>>,
}

impl TabularMdp {
    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 || self.n_states * self.n_actions > 100 * 100 {
            return Err(Error::Validation("tabular MDP must have 1..=100 states/actions".into()));
        }
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let total: f64 = self.transition[s][a].iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::Validation(format!(
                        "transition row (s={s}, a={a}) sums to {total}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Soft state value alpha * logsumexp(q / alpha); reduces to max at alpha -> 0.
pub fn soft_value(q_row: &[f64], alpha: f64) -> f64 {
    let max = q_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if alpha <= 0.0 {
        return max;
    }
    let sum: f64 = q_row.iter().map(|q| ((q - max) / alpha).exp()).sum();
    max + alpha * sum.ln()
}

pub fn tabular_soft_value_iteration(mdp: &TabularMdp, alpha: f64, gamma: f64) -> Result<Vec<Vec<f64>>> {
    mdp.validate()?;
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Validation("gamma must lie in [0, 1)".into()));
    }
    let mut q = vec![vec![0.0; mdp.n_actions]; mdp.n_states];
    for iter in 0..1_000_000u64 {
        let v: Vec<f64> = q.iter().map(|row| soft_value(row, alpha)).collect();
        let mut next = vec![vec![0.0; mdp.n_actions]; mdp.n_states];
        let mut delta = 0.0f64;
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                let ev: f64 = mdp.transition[s][a].iter().zip(&v).map(|(p, v)| p * v).sum();
                next[s][a] = mdp.reward[s][a] + gamma * ev;
                delta = delta.max((next[s][a] - q[s][a]).abs());
            }
        }
        q = next;
        if delta < 1e-10 {
            return Ok(q);
        }
        if iter == 999_999 {
            break;
        }
    }
    Err(Error::Numeric("soft value iteration did not converge in 1e6 iterations".into()))
}
