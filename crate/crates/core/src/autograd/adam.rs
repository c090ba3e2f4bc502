//! Adam updates over persistent parameters.

use super::{Param, Tape};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// What happened to one optimizer group in one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AdamOutcome {
    pub applied: usize,
    /// Updates skipped because the gradient contained a NaN.
    pub skipped_nan: usize,
}

/// One Adam update for a single parameter. Returns false (and leaves the
/// parameter untouched, including its moments) if the gradient has a NaN.
pub fn adam_update(param: &Param, grad: &[f64], lr: f64) -> bool {
    assert!(lr > 0.0, "adam: lr must be positive");
    assert_eq!(param.numel(), grad.len(), "adam: grad length mismatch for {:?}", param.name());
    if grad.iter().any(|g| g.is_nan()) {
        return false;
    }
    param.with_inner_mut(|inner| {
        inner.adam_t += 1;
        let t = inner.adam_t as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..grad.len() {
            let g = grad[i];
            inner.adam_m[i] = ADAM_BETA1 * inner.adam_m[i] + (1.0 - ADAM_BETA1) * g;
            inner.adam_v[i] = ADAM_BETA2 * inner.adam_v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = inner.adam_m[i] / bc1;
            let v_hat = inner.adam_v[i] / bc2;
            inner.data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    });
    true
}

/// Apply Adam to every parameter of `group` that received a gradient on
/// `tape`. Parameters the loss never reached are left untouched.
pub fn adam_step_group(tape: &Tape, group: &[Param], lr: f64) -> AdamOutcome {
    let grads = tape.param_grads();
    let mut outcome = AdamOutcome::default();
    for p in group {
        if let Some((_, g)) = grads.iter().find(|(gp, _)| gp.key() == p.key()) {
            if adam_update(p, g, lr) {
                outcome.applied += 1;
            } else {
                outcome.skipped_nan += 1;
            }
        }
    }
    outcome
}
