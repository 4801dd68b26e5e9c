use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};

use super::params::ParamSource;

/// Evaluates `objective` at `theta` and returns its value with the exact
/// reverse-mode gradient. The objective records onto the supplied tape,
/// reading parameters through the [`ParamSource`].
pub fn evaluate_with_gradients<F>(theta: &[f64], objective: F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&mut Tape, &ParamSource) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = objective(&mut tape, &ParamSource::trainable(theta))?;
    tape.check_finite()?;
    let grad = tape.gradient(out, theta.len())?;
    Ok((tape.scalar(out), grad))
}

fn value_at<F>(theta: &[f64], objective: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamSource) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = objective(&mut tape, &ParamSource::frozen(theta))?;
    tape.check_finite()?;
    Ok(tape.scalar(out))
}

/// Compares the reverse-mode gradient with central differences, coordinate by
/// coordinate, and returns the largest
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn finite_difference_check<F>(theta: &[f64], objective: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamSource) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(invalid(format!("eps = {eps} outside [1e-7, 1e-3]")));
    }
    let (_, grad) = evaluate_with_gradients(theta, &objective)?;
    let mut probe = theta.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        probe[i] = theta[i] + eps;
        let up = value_at(&probe, &objective)?;
        probe[i] = theta[i] - eps;
        let down = value_at(&probe, &objective)?;
        probe[i] = theta[i];
        let numeric = (up - down) / (2.0 * eps);
        let scale = 1f64.max(grad[i].abs()).max(numeric.abs());
        worst = worst.max((grad[i] - numeric).abs() / scale);
    }
    Ok(worst)
}
