//! Sampling from `p(x) r(x)` by multiplying an external factor `r` into each
//! reverse step, either exactly or as a perturbation of the kernel.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, Zip};
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::kernels::{clamp_rate, DiagonalBatch, DiagonalDistribution, DiffusionKind, VARIANCE_FLOOR};
use crate::objective::DiffusionModel;

/// Callback used by [`ExternalFactor::Generic`].
pub type FactorFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// The second distribution `r(x)`.
#[derive(Clone)]
pub enum ExternalFactor {
    /// Delta functions on the coordinates where `known` is set, constant
    /// elsewhere.
    CoordinateMask { known: Vec<bool>, values: Vec<f64> },
    /// `r(x) = N(y; x, noise_var I)`.
    GaussianObservation { y: Vec<f64>, noise_var: f64 },
    /// For Gaussian diffusion, returns `grad log r` at the kernel mean; for
    /// binomial diffusion, returns per-bit `r(x_i = 1)` given the kernel rates.
    Generic(FactorFn),
}

impl fmt::Debug for ExternalFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::CoordinateMask { known, values } => f
                .debug_struct("CoordinateMask")
                .field("known", known)
                .field("values", values)
                .finish(),
            Self::GaussianObservation { y, noise_var } => f
                .debug_struct("GaussianObservation")
                .field("y", y)
                .field("noise_var", noise_var)
                .finish(),
            Self::Generic(_) => f.write_str("Generic(..)"),
        }
    }
}

impl ExternalFactor {
    pub fn mask(known: Vec<bool>, values: Vec<f64>) -> Result<Self> {
        if known.len() != values.len() {
            return Err(invalid("mask and observed values differ in length"));
        }
        if known.iter().zip(&values).any(|(&k, v)| k && !v.is_finite()) {
            return Err(invalid("observed values must be finite"));
        }
        Ok(Self::CoordinateMask { known, values })
    }

    pub fn gaussian(y: Vec<f64>, noise_var: f64) -> Result<Self> {
        if !(noise_var > 0.0) || !noise_var.is_finite() {
            return Err(invalid("observation noise variance must be positive"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(invalid("observation must be finite"));
        }
        Ok(Self::GaussianObservation { y, noise_var })
    }

    pub fn generic(f: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        Self::Generic(Arc::new(f))
    }

    /// Checks that the factor can multiply a `kind` process of dimension `dim`.
    pub fn check(&self, kind: DiffusionKind, dim: usize) -> Result<()> {
        let len = match self {
            Self::CoordinateMask { known, values } => {
                if kind == DiffusionKind::Binomial && known.iter().zip(values).any(|(&k, &v)| k && v != 0.0 && v != 1.0) {
                    return Err(invalid("binary observations must be 0 or 1"));
                }
                known.len()
            }
            Self::GaussianObservation { y, .. } => {
                if kind != DiffusionKind::Gaussian {
                    return Err(invalid("a Gaussian observation cannot multiply binomial diffusion"));
                }
                y.len()
            }
            Self::Generic(_) => dim,
        };
        if len != dim {
            return Err(invalid(format!("factor has dimension {len}, process has {dim}")));
        }
        Ok(())
    }
}

/// How the factor applied at step `t` relates to `r(x^(0))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RSchedule {
    /// `r(x^(t)) = r(x^(0))`.
    #[default]
    Constant,
    /// `r(x^(t)) = r(x^(0))^((T - t) / T)`.
    Annealed,
}

impl RSchedule {
    pub fn exponent(self, t: usize, steps: usize) -> f64 {
        match self {
            Self::Constant => 1.0,
            Self::Annealed => (steps - t) as f64 / steps as f64,
        }
    }
}

impl fmt::Display for RSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::Annealed => "annealed",
        })
    }
}

impl std::str::FromStr for RSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "annealed" => Ok(Self::Annealed),
            other => Err(invalid(format!("unknown r schedule '{other}'"))),
        }
    }
}

/// Per-step log normalizers `log Z~_t(x^(t+1))`.
#[derive(Debug, Clone, PartialEq)]
pub enum StepNormalizer {
    /// One value per sample row.
    Recorded(Vec<f64>),
    /// The perturbative Gaussian path leaves the normalizer implicit.
    Implicit,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NormalizerLedger {
    /// `(t, normalizer)` pairs, where `t` is the step whose state was drawn.
    pub steps: Vec<(usize, StepNormalizer)>,
}

impl NormalizerLedger {
    pub fn get(&self, t: usize) -> Option<&StepNormalizer> {
        self.steps.iter().find(|(s, _)| *s == t).map(|(_, n)| n)
    }
}

/// `f_mu + f_Sigma * grad log r`, leaving the variance unchanged.
pub fn perturbed_gaussian_kernel(moments: &DiagonalDistribution, grad_log_r: &[f64]) -> Result<DiagonalDistribution> {
    let DiagonalDistribution::Gaussian { mean, var } = moments else {
        return Err(kind_error(DiffusionKind::Gaussian, moments.kind()));
    };
    if grad_log_r.len() != mean.len() || grad_log_r.iter().any(|g| !g.is_finite()) {
        return Err(invalid("log-gradient must be finite and match the dimension"));
    }
    let shifted = mean.iter().zip(var).zip(grad_log_r).map(|((m, v), g)| m + v * g).collect();
    DiagonalDistribution::gaussian(shifted, var.clone())
}

/// The conjugate product of diagonal Gaussian moments with `N(y; x, sigma_r2 I)`.
pub fn exact_gaussian_product(moments: &DiagonalDistribution, y: &[f64], sigma_r2: f64) -> Result<DiagonalDistribution> {
    let DiagonalDistribution::Gaussian { mean, var } = moments else {
        return Err(kind_error(DiffusionKind::Gaussian, moments.kind()));
    };
    if !(sigma_r2 > 0.0) || y.len() != mean.len() {
        return Err(invalid("observation must match the dimension and have positive variance"));
    }
    let (mut m, mut v) = (Vec::with_capacity(y.len()), Vec::with_capacity(y.len()));
    for ((mu, s2), yi) in mean.iter().zip(var).zip(y) {
        let (pm, pv) = gaussian_product(*mu, *s2, *yi, sigma_r2);
        m.push(pm);
        v.push(pv);
    }
    DiagonalDistribution::gaussian(m, v)
}

fn gaussian_product(mu: f64, var: f64, y: f64, sigma_r2: f64) -> (f64, f64) {
    if sigma_r2 == f64::INFINITY {
        return (mu, var);
    }
    let v = var * sigma_r2 / (var + sigma_r2);
    (v * (mu / var + y / sigma_r2), v)
}

/// Bayes-normalized product of `Bernoulli(c)` with a per-bit factor `d`.
pub fn perturbed_binomial_kernel(c: &[f64], d: &[f64]) -> Result<Vec<f64>> {
    if c.len() != d.len() {
        return Err(invalid("rates and factor differ in length"));
    }
    if c.iter().chain(d).any(|r| !(0.0..=1.0).contains(r)) {
        return Err(invalid("rates and factor values must lie in [0, 1]"));
    }
    Ok(c.iter().zip(d).map(|(&c, &d)| binomial_product(c, d).0).collect())
}

/// Product rate and its normalizer `c d + (1 - c)(1 - d)`.
fn binomial_product(c: f64, d: f64) -> (f64, f64) {
    let (c, d) = (clamp_rate(c), clamp_rate(d));
    let z = c * d + (1.0 - c) * (1.0 - d);
    (c * d / z, z)
}

/// `d^s / (d^s + (1 - d)^s)`: the per-bit factor raised to power `s`.
fn tempered_rate(d: f64, s: f64) -> f64 {
    let (a, b) = (d.powf(s), (1.0 - d).powf(s));
    a / (a + b)
}

fn kind_error(expected: DiffusionKind, found: DiffusionKind) -> Error {
    Error::KindMismatch {
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    let var = var.max(VARIANCE_FLOOR);
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
}

/// Multiplies every row of `batch` by `r^s`, returning the modified batch and
/// its per-row log normalizer (absent on the perturbative Gaussian path).
/// Coordinate masks are not applied here: their delta product is a clamp
/// after sampling, see [`clamp_known`].
pub fn multiply_factor(batch: &DiagonalBatch, factor: &ExternalFactor, s: f64) -> Result<(DiagonalBatch, StepNormalizer)> {
    let rows = batch.rows();
    if s == 0.0 {
        return Ok((batch.clone(), StepNormalizer::Recorded(vec![0.0; rows])));
    }
    match (factor, batch) {
        (ExternalFactor::CoordinateMask { known, values }, _) => {
            let mut log_z = vec![0.0; rows];
            for (i, lz) in log_z.iter_mut().enumerate() {
                let row = batch.row(i);
                for (j, _) in known.iter().enumerate().filter(|(_, &k)| k) {
                    *lz += match &row {
                        DiagonalDistribution::Gaussian { mean, var } => log_normal(values[j], mean[j], var[j]),
                        DiagonalDistribution::Bernoulli { rate } => {
                            let r = clamp_rate(rate[j]);
                            if values[j] == 1.0 { r.ln() } else { (1.0 - r).ln() }
                        }
                    };
                }
            }
            Ok((batch.clone(), StepNormalizer::Recorded(log_z)))
        }
        (ExternalFactor::GaussianObservation { y, noise_var }, DiagonalBatch::Gaussian { mean, var }) => {
            let sigma_r2 = noise_var / s;
            let (mut m, mut v) = (mean.clone(), var.clone());
            let mut log_z = vec![0.0; rows];
            for i in 0..rows {
                for (j, &yj) in y.iter().enumerate() {
                    let (pm, pv) = gaussian_product(mean[[i, j]], var[[i, j]], yj, sigma_r2);
                    log_z[i] += log_normal(yj, mean[[i, j]], var[[i, j]] + sigma_r2);
                    m[[i, j]] = pm;
                    v[[i, j]] = pv;
                }
            }
            Ok((DiagonalBatch::Gaussian { mean: m, var: v }, StepNormalizer::Recorded(log_z)))
        }
        (ExternalFactor::GaussianObservation { .. }, DiagonalBatch::Bernoulli { .. }) => {
            Err(kind_error(DiffusionKind::Gaussian, DiffusionKind::Binomial))
        }
        (ExternalFactor::Generic(f), DiagonalBatch::Gaussian { mean, var }) => {
            let mut m = mean.clone();
            for (mut row, v) in m.rows_mut().into_iter().zip(var.rows()) {
                let grad = f(&row.to_vec());
                if grad.len() != row.len() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(invalid("log-gradient callback returned a bad vector"));
                }
                Zip::from(&mut row).and(&v).and(&ndarray::ArrayView1::from(&grad)).for_each(|m, v, g| *m += s * v * g);
            }
            Ok((DiagonalBatch::Gaussian { mean: m, var: var.clone() }, StepNormalizer::Implicit))
        }
        (ExternalFactor::Generic(f), DiagonalBatch::Bernoulli { rate }) => {
            let mut out = rate.clone();
            let mut log_z = vec![0.0; rows];
            for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                let d = f(&row.to_vec());
                if d.len() != row.len() || d.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(invalid("factor callback must return one rate in [0, 1] per bit"));
                }
                for (c, d) in row.iter_mut().zip(d) {
                    let d = tempered_rate(d, s);
                    let (p, z) = binomial_product(*c, d);
                    // Normalizer of the product with r = d^x (1 - d)^(1 - x).
                    log_z[i] += z.ln();
                    *c = p;
                }
            }
            Ok((DiagonalBatch::Bernoulli { rate: out }, StepNormalizer::Recorded(log_z)))
        }
    }
}

/// Overwrites known coordinates with their observed values.
pub fn clamp_known(x: &mut Array2<f64>, factor: &ExternalFactor) {
    if let ExternalFactor::CoordinateMask { known, values } = factor {
        for mut row in x.rows_mut() {
            for (j, _) in known.iter().enumerate().filter(|(_, &k)| k) {
                row[j] = values[j];
            }
        }
    }
}

/// Output of [`sample_conditional`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalRecord {
    pub samples: Array2<f64>,
    pub ledger: NormalizerLedger,
}

/// Draws `n` samples from the modified reverse trajectory for `p(x) r(x)`.
pub fn sample_conditional<R: Rng + ?Sized>(
    dm: &DiffusionModel,
    factor: &ExternalFactor,
    schedule: RSchedule,
    n: usize,
    rng: &mut R,
) -> Result<ConditionalRecord> {
    factor.check(dm.kind(), dm.dim())?;
    if n == 0 {
        return Err(invalid("need at least one sample"));
    }
    let steps = dm.steps();
    let (d, kind) = (dm.dim(), dm.kind());
    let pi = match kind {
        DiffusionKind::Gaussian => DiagonalBatch::Gaussian {
            mean: Array2::zeros((n, d)),
            var: Array2::ones((n, d)),
        },
        DiffusionKind::Binomial => DiagonalBatch::Bernoulli {
            rate: Array2::from_elem((n, d), 0.5),
        },
    };
    let mut ledger = NormalizerLedger::default();
    let s = schedule.exponent(steps, steps);
    let (start, norm) = multiply_factor(&pi, factor, s)?;
    let mut x = start.sample(rng);
    if s > 0.0 {
        clamp_known(&mut x, factor);
    }
    ledger.steps.push((steps, norm));
    for t in (1..=steps).rev() {
        let s = schedule.exponent(t - 1, steps);
        let (kernel, norm) = multiply_factor(&dm.reverse_batch(&x, t)?, factor, s)?;
        x = kernel.sample(rng);
        clamp_known(&mut x, factor);
        ledger.steps.push((t - 1, norm));
    }
    Ok(ConditionalRecord { samples: x, ledger })
}
