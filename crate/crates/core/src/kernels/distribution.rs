use std::f64::consts::{LN_2, PI};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};

use super::DiffusionKind;

/// Rates are clamped to `[RATE_FLOOR, 1 - RATE_FLOOR]` before any logarithm.
pub const RATE_FLOOR: f64 = 1e-7;
/// Gaussian variances are floored here before any logarithm.
pub const VARIANCE_FLOOR: f64 = 1e-12;

pub(crate) fn clamp_rate(r: f64) -> f64 {
    r.clamp(RATE_FLOOR, 1.0 - RATE_FLOOR)
}

/// `-r ln r - (1 - r) ln(1 - r)` with `0 ln 0 = 0`.
pub fn binary_entropy(r: f64) -> f64 {
    let term = |p: f64| if p <= 0.0 { 0.0 } else { -p * p.ln() };
    term(r) + term(1.0 - r)
}

/// Factorized distribution over `d` coordinates: independent Gaussians or
/// independent Bernoulli trials.
#[derive(Debug, Clone, PartialEq)]
pub enum DiagonalDistribution {
    Gaussian { mean: Vec<f64>, var: Vec<f64> },
    Bernoulli { rate: Vec<f64> },
}

impl DiagonalDistribution {
    pub fn gaussian(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(invalid("mean and variance lengths differ"));
        }
        if var.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(invalid("variances must be positive and finite"));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(invalid("non-finite mean"));
        }
        Ok(Self::Gaussian { mean, var })
    }

    pub fn bernoulli(rate: Vec<f64>) -> Result<Self> {
        if rate.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(invalid("Bernoulli rates must lie in [0, 1]"));
        }
        Ok(Self::Bernoulli { rate })
    }

    pub fn kind(&self) -> DiffusionKind {
        match self {
            Self::Gaussian { .. } => DiffusionKind::Gaussian,
            Self::Bernoulli { .. } => DiffusionKind::Binomial,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Gaussian { mean, .. } => mean.len(),
            Self::Bernoulli { rate } => rate.len(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Self::Gaussian { mean, var } => mean
                .iter()
                .zip(var)
                .map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            Self::Bernoulli { rate } => rate
                .iter()
                .map(|&r| if rng.random::<f64>() < r { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    /// Log density (Gaussian) or log mass (Bernoulli) at `x`, in nats.
    pub fn log_prob(&self, x: &[f64]) -> f64 {
        match self {
            Self::Gaussian { mean, var } => mean
                .iter()
                .zip(var)
                .zip(x)
                .map(|((m, v), x)| {
                    let v = v.max(VARIANCE_FLOOR);
                    -0.5 * ((2.0 * PI * v).ln() + (x - m).powi(2) / v)
                })
                .sum(),
            Self::Bernoulli { rate } => rate
                .iter()
                .zip(x)
                .map(|(&r, &x)| {
                    let r = clamp_rate(r);
                    if x > 0.5 {
                        r.ln()
                    } else {
                        (1.0 - r).ln()
                    }
                })
                .sum(),
        }
    }
}

fn check_pair(q: &DiagonalDistribution, p: &DiagonalDistribution) -> Result<()> {
    if q.kind() != p.kind() {
        return Err(Error::KindMismatch {
            expected: q.kind().to_string(),
            found: p.kind().to_string(),
        });
    }
    if q.dim() != p.dim() {
        return Err(invalid(format!("dimension {} vs {}", q.dim(), p.dim())));
    }
    Ok(())
}

/// `KL(q || p)` in nats, summed over coordinates.
pub fn kl_divergence(q: &DiagonalDistribution, p: &DiagonalDistribution) -> Result<f64> {
    check_pair(q, p)?;
    let kl = match (q, p) {
        (
            DiagonalDistribution::Gaussian { mean: mq, var: vq },
            DiagonalDistribution::Gaussian { mean: mp, var: vp },
        ) => mq
            .iter()
            .zip(vq)
            .zip(mp.iter().zip(vp))
            .map(|((mq, vq), (mp, vp))| {
                let vq = vq.max(VARIANCE_FLOOR);
                let vp = vp.max(VARIANCE_FLOOR);
                0.5 * (vq / vp + (mp - mq).powi(2) / vp - 1.0 + (vp / vq).ln())
            })
            .sum(),
        (DiagonalDistribution::Bernoulli { rate: rq }, DiagonalDistribution::Bernoulli { rate: rp }) => rq
            .iter()
            .zip(rp)
            .map(|(&q, &p)| {
                let p = if p == q { p } else { clamp_rate(p) };
                let term = |a: f64, b: f64| if a <= 0.0 { 0.0 } else { a * (a / b).ln() };
                term(q, p) + term(1.0 - q, 1.0 - p)
            })
            .sum(),
        _ => unreachable!(),
    };
    Ok(kl)
}

/// Differential entropy (Gaussian) or Shannon entropy (Bernoulli), in nats.
pub fn entropy(dist: &DiagonalDistribution) -> f64 {
    match dist {
        DiagonalDistribution::Gaussian { var, .. } => var
            .iter()
            .map(|v| 0.5 * (2.0 * PI * std::f64::consts::E * v.max(VARIANCE_FLOOR)).ln())
            .sum(),
        DiagonalDistribution::Bernoulli { rate } => rate.iter().map(|&r| binary_entropy(r)).sum(),
    }
}

/// Converts nats to bits.
pub fn to_bits(nats: f64) -> f64 {
    nats / LN_2
}
