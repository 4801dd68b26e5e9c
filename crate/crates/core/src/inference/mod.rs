//! Ancestral sampling from the reverse chain, importance-weighted likelihood
//! estimates over forward trajectories, and per-step entropy bounds.

use std::f64::consts::{E, PI};

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::kernels::{binary_entropy, forward_kernel_batch, DiagonalBatch, DiagonalDistribution, DiffusionKind, DiffusionSpec};
use crate::objective::DiffusionModel;

/// Output of [`sample_reverse`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    /// Final draws `x^(0)`, one per row.
    pub samples: Array2<f64>,
    /// States `x^(T), ..., x^(0)` when frames were requested, else empty.
    pub frames: Vec<Array2<f64>>,
    /// `log p(x^(t-1) | x^(t))` per row; column `t - 1` holds step `t`.
    pub log_reverse: Array2<f64>,
}

impl TrajectoryRecord {
    /// The frame holding `x^(t)`.
    pub fn frame(&self, t: usize) -> Option<&Array2<f64>> {
        let steps = self.log_reverse.ncols();
        (t <= steps && !self.frames.is_empty()).then(|| &self.frames[steps - t])
    }
}

fn equilibrium_batch(spec: &DiffusionSpec, rows: usize) -> DiagonalBatch {
    let d = spec.dim;
    match spec.kind() {
        DiffusionKind::Gaussian => DiagonalBatch::Gaussian {
            mean: Array2::zeros((rows, d)),
            var: Array2::ones((rows, d)),
        },
        DiffusionKind::Binomial => DiagonalBatch::Bernoulli {
            rate: Array2::from_elem((rows, d), 0.5),
        },
    }
}

/// Draws `n` samples by starting from `pi` and applying the reverse kernels
/// for `t = T, ..., 1` (the last being the edge rule).
pub fn sample_reverse<R: Rng + ?Sized>(dm: &DiffusionModel, n: usize, rng: &mut R, keep_frames: bool) -> Result<TrajectoryRecord> {
    if n == 0 {
        return Err(invalid("need at least one sample"));
    }
    let steps = dm.steps();
    let mut x = equilibrium_batch(&dm.spec, n).sample(rng);
    let mut frames = Vec::new();
    let mut log_reverse = Array2::zeros((n, steps));
    for t in (1..=steps).rev() {
        if keep_frames {
            frames.push(x.clone());
        }
        let kernel = dm.reverse_batch(&x, t)?;
        x = kernel.sample(rng);
        log_reverse.column_mut(t - 1).assign(&Array1::from(kernel.log_prob_rows(&x)));
    }
    if keep_frames {
        frames.push(x.clone());
    }
    Ok(TrajectoryRecord {
        samples: x,
        frames,
        log_reverse,
    })
}

/// An importance-sampled log likelihood in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodEstimate {
    pub log_p: f64,
    /// Delta-method standard error of `log_p`.
    pub stderr: f64,
    /// Per-trajectory log weights.
    pub log_weights: Vec<f64>,
}

impl LikelihoodEstimate {
    /// Largest pairwise difference between log weights, relative to their
    /// mean magnitude.
    pub fn relative_spread(&self) -> f64 {
        let (lo, hi) = self
            .log_weights
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &w| (lo.min(w), hi.max(w)));
        let scale = self.log_weights.iter().map(|w| w.abs()).sum::<f64>() / self.log_weights.len() as f64;
        (hi - lo) / scale.max(f64::MIN_POSITIVE)
    }
}

/// Combines log weights with a max-shifted log-mean-exp.
pub fn log_mean_exp(log_weights: &[f64]) -> Result<(f64, f64)> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::ZeroDensity);
    }
    if !max.is_finite() {
        return Err(Error::NonFinite { node: "importance weight".into() });
    }
    let n = log_weights.len() as f64;
    let scaled: Vec<f64> = log_weights.iter().map(|w| (w - max).exp()).collect();
    let mean = scaled.iter().sum::<f64>() / n;
    let stderr = if log_weights.len() > 1 {
        let var = scaled.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt() / mean
    } else {
        0.0
    };
    Ok((max + mean.ln(), stderr))
}

/// Log weights `log p(x^(0..T)) - log q(x^(1..T) | x^(0))` for `n_traj`
/// forward trajectories started from every row of `x0`; returns an
/// `x0.rows × n_traj` matrix.
pub fn trajectory_log_weights<R: Rng + ?Sized>(
    dm: &DiffusionModel,
    x0: &Array2<f64>,
    n_traj: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if n_traj == 0 {
        return Err(invalid("need at least one trajectory"));
    }
    if x0.ncols() != dm.dim() || x0.nrows() == 0 {
        return Err(invalid("data do not match the model dimension"));
    }
    for row in x0.rows() {
        dm.spec.check_state(row.as_slice().unwrap_or(&row.to_vec()))?;
    }
    let rows = x0.nrows() * n_traj;
    let mut prev = Array2::zeros((rows, dm.dim()));
    for (i, mut r) in prev.rows_mut().into_iter().enumerate() {
        r.assign(&x0.row(i / n_traj));
    }
    let mut w = Array1::<f64>::zeros(rows);
    for t in 1..=dm.steps() {
        let forward = forward_kernel_batch(dm.kind(), &prev, dm.spec.beta(t));
        let next = forward.sample(rng);
        let log_q = forward.log_prob_rows(&next);
        let log_p = dm.reverse_batch(&next, t)?.log_prob_rows(&prev);
        for (i, wi) in w.iter_mut().enumerate() {
            *wi += log_p[i] - log_q[i];
        }
        prev = next;
    }
    let log_pi = equilibrium_batch(&dm.spec, rows).log_prob_rows(&prev);
    w += &Array1::from(log_pi);
    if let Some(i) = w.iter().position(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite {
            node: format!("log weight of trajectory {i}"),
        });
    }
    Ok(w.into_shape_with_order((x0.nrows(), n_traj)).expect("rows × n_traj"))
}

/// Importance-sampled estimate of `log p(x0)` from `n_traj` forward
/// trajectories.
pub fn estimate_log_likelihood<R: Rng + ?Sized>(
    dm: &DiffusionModel,
    x0: &[f64],
    n_traj: usize,
    rng: &mut R,
) -> Result<LikelihoodEstimate> {
    let x = Array2::from_shape_vec((1, x0.len()), x0.to_vec()).map_err(|e| invalid(e.to_string()))?;
    let w = trajectory_log_weights(dm, &x, n_traj, rng)?;
    let log_weights = w.row(0).to_vec();
    let (log_p, stderr) = log_mean_exp(&log_weights)?;
    Ok(LikelihoodEstimate {
        log_p,
        stderr,
        log_weights,
    })
}

/// Mean importance-sampled log likelihood over a dataset, nats per datum.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetLikelihood {
    pub per_datum: Vec<f64>,
    pub mean: f64,
    /// Standard error of `mean`, combining the spread across data with each
    /// datum's importance-sampling error.
    pub stderr: f64,
}

pub fn estimate_dataset_log_likelihood<R: Rng + ?Sized>(
    dm: &DiffusionModel,
    data: &Array2<f64>,
    n_traj: usize,
    rng: &mut R,
) -> Result<DatasetLikelihood> {
    let w = trajectory_log_weights(dm, data, n_traj, rng)?;
    let mut per_datum = Vec::with_capacity(data.nrows());
    let mut mc_var = 0.0;
    for row in w.axis_iter(Axis(0)) {
        let (lp, se) = log_mean_exp(row.as_slice().expect("contiguous"))?;
        per_datum.push(lp);
        mc_var += se * se;
    }
    let n = per_datum.len() as f64;
    let mean = per_datum.iter().sum::<f64>() / n;
    let spread = if per_datum.len() > 1 {
        per_datum.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n
    } else {
        0.0
    };
    Ok(DatasetLikelihood {
        per_datum,
        mean,
        stderr: (spread + mc_var / (n * n)).sqrt(),
    })
}

/// Bounds on the reverse-kernel entropy `H_p(X^(t-1) | X^(t))`, in nats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyBoundReport {
    pub t: usize,
    /// `H_q(X^(t) | X^(t-1))`.
    pub upper: f64,
    /// `upper + H_q(X^(t-1) | X^(0)) - H_q(X^(t) | X^(0))`.
    pub lower: f64,
}

/// Largest relative departure from unit pooled variance accepted for
/// Gaussian entropy bounds.
pub const VARIANCE_TOLERANCE: f64 = 0.1;

fn conditional_entropy(spec: &DiffusionSpec, x0: &Array2<f64>, t: usize) -> f64 {
    let d = spec.dim as f64;
    match spec.kind() {
        DiffusionKind::Gaussian => 0.5 * d * (2.0 * PI * E * (1.0 - spec.schedule.alpha_bar(t))).ln(),
        DiffusionKind::Binomial => {
            let g = spec.schedule.gamma(t);
            let total: f64 = x0.iter().map(|&x| binary_entropy(g * x + 0.5 * (1.0 - g))).sum();
            total / x0.nrows() as f64
        }
    }
}

/// Upper and lower bounds on the entropy of the true reverse kernel at step
/// `t`. Gaussian data must have pooled variance 1.
pub fn entropy_bounds(spec: &DiffusionSpec, t: usize, x0: &Array2<f64>) -> Result<EntropyBoundReport> {
    spec.check_step(t, 2)?;
    if x0.ncols() != spec.dim || x0.nrows() == 0 {
        return Err(invalid("data do not match the process dimension"));
    }
    let d = spec.dim as f64;
    let beta = spec.beta(t);
    let upper = match spec.kind() {
        DiffusionKind::Gaussian => {
            let n = x0.len() as f64;
            let mean = x0.sum() / n;
            let var = x0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            if (var - 1.0).abs() > VARIANCE_TOLERANCE {
                return Err(invalid(format!(
                    "entropy bounds need variance-1 data, found pooled variance {var:.4}"
                )));
            }
            0.5 * d * (2.0 * PI * E * beta).ln()
        }
        DiffusionKind::Binomial => {
            for row in x0.rows() {
                spec.check_state(&row.to_vec())?;
            }
            d * binary_entropy(0.5 * beta)
        }
    };
    let lower = upper + conditional_entropy(spec, x0, t - 1) - conditional_entropy(spec, x0, t);
    Ok(EntropyBoundReport { t, upper, lower })
}

/// Bounds for every `t = 2..T`.
pub fn entropy_bound_table(spec: &DiffusionSpec, x0: &Array2<f64>) -> Result<Vec<EntropyBoundReport>> {
    (2..=spec.steps()).map(|t| entropy_bounds(spec, t, x0)).collect()
}

/// Mean entropy of the model's reverse kernel at step `t` over the rows of
/// `x_t`, in nats.
pub fn reverse_kernel_entropy(dm: &DiffusionModel, x_t: &Array2<f64>, t: usize) -> Result<f64> {
    let batch = dm.reverse_batch(x_t, t)?;
    let total: f64 = (0..batch.rows()).map(|i| crate::kernels::entropy(&batch.row(i))).sum();
    Ok(total / batch.rows() as f64)
}

/// Exact `log p(x0)` in nats for a binomial model, marginalizing the reverse
/// chain state by state. Cost grows as `T 4^d`; intended for tiny instances.
pub fn exact_binomial_log_likelihood(dm: &DiffusionModel, x0: &[f64]) -> Result<f64> {
    if dm.kind() != DiffusionKind::Binomial {
        return Err(Error::Unsupported("exhaustive enumeration needs a discrete state space".into()));
    }
    dm.spec.check_state(x0)?;
    let (d, steps) = (dm.dim(), dm.steps());
    if d > 10 {
        return Err(invalid("too many trajectories to enumerate"));
    }
    let states: Vec<Vec<f64>> = (0..1usize << d)
        .map(|code| (0..d).map(|i| ((code >> i) & 1) as f64).collect())
        .collect();
    let pi = DiagonalDistribution::bernoulli(vec![0.5; d])?;
    // p(x^(t)) over every state, propagated from t = T down to t = 1.
    let mut marginal: Vec<f64> = states.iter().map(|s| pi.log_prob(s).exp()).collect();
    for t in (2..=steps).rev() {
        let mut next = vec![0.0; states.len()];
        for (s, &ps) in states.iter().zip(&marginal) {
            let kernel = dm.reverse_kernel(s, t)?;
            for (j, target) in states.iter().enumerate() {
                next[j] += ps * kernel.log_prob(target).exp();
            }
        }
        marginal = next;
    }
    let mut total = 0.0;
    for (s, &ps) in states.iter().zip(&marginal) {
        total += ps * dm.reverse_kernel(s, 1)?.log_prob(x0).exp();
    }
    if total <= 0.0 {
        return Err(Error::ZeroDensity);
    }
    Ok(total.ln())
}

fn mean_pair_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for x in a.rows() {
        for y in b.rows() {
            total += x.iter().zip(y.iter()).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        }
    }
    total / (a.nrows() * b.nrows()) as f64
}

/// Two-sample energy distance `2 E|X - Y| - E|X - X'| - E|Y - Y'|`.
pub fn energy_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() || a.nrows() == 0 || b.nrows() == 0 {
        return Err(invalid("samples must be non-empty and share a dimension"));
    }
    Ok(2.0 * mean_pair_distance(a, b) - mean_pair_distance(a, a) - mean_pair_distance(b, b))
}

/// The `quantile` of the energy distance between two disjoint size-`n`
/// subsets of `pool`, over `reps` random splits.
pub fn energy_null_quantile<R: Rng + ?Sized>(
    pool: &Array2<f64>,
    n: usize,
    reps: usize,
    quantile: f64,
    rng: &mut R,
) -> Result<f64> {
    if 2 * n > pool.nrows() || reps == 0 || !(0.0..=1.0).contains(&quantile) {
        return Err(invalid("pool must hold two disjoint subsets and reps must be positive"));
    }
    let mut values = Vec::with_capacity(reps);
    for _ in 0..reps {
        let idx = rand::seq::index::sample(rng, pool.nrows(), 2 * n).into_vec();
        let a = pool.select(Axis(0), &idx[..n]);
        let b = pool.select(Axis(0), &idx[n..]);
        values.push(energy_distance(&a, &b)?);
    }
    values.sort_by(f64::total_cmp);
    let k = ((quantile * reps as f64).ceil() as usize).clamp(1, reps) - 1;
    Ok(values[k])
}

#[cfg(test)]
mod tests;
