//! Central-difference gradient verification.

use super::{Tape, Tensor};
use crate::{Error, Result};

/// Compare the analytic gradient of a scalar-valued tensor function against
/// central finite differences at `point`.
///
/// Returns the max over coordinates of |analytic - fd| / max(1, |fd|). The
/// function is re-run on a fresh tape per evaluation, so any internal noise
/// must be baked into the closure.
pub fn grad_check<F>(f: F, point: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Tensor,
{
    grad_check_shaped(f, point, &[point.len()], h)
}

pub fn grad_check_shaped<F>(f: F, point: &[f64], shape: &[usize], h: f64) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Tensor,
{
    assert!(h > 0.0, "grad_check: h must be positive");
    let analytic = {
        let tape = Tape::new();
        let x = tape.leaf_grad(point.to_vec(), shape);
        let y = f(&tape, &x);
        if y.numel() != 1 {
            return Err(Error::Autograd(format!(
                "grad_check: f must be scalar-valued, got shape {:?}",
                y.shape()
            )));
        }
        tape.backward(&y)?;
        x.grad().unwrap_or_else(|| vec![0.0; point.len()])
    };

    let eval = |p: &[f64]| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.leaf(p.to_vec(), shape);
        let y = f(&tape, &x).scalar();
        if !y.is_finite() {
            return Err(Error::Autograd("grad_check: f non-finite at perturbed point".into()));
        }
        Ok(y)
    };

    let mut worst = 0.0f64;
    let mut perturbed = point.to_vec();
    for i in 0..point.len() {
        let orig = perturbed[i];
        perturbed[i] = orig + h;
        let plus = eval(&perturbed)?;
        perturbed[i] = orig - h;
        let minus = eval(&perturbed)?;
        perturbed[i] = orig;
        let fd = (plus - minus) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
