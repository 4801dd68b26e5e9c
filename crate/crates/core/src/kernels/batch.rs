use ndarray::{Array2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use super::distribution::{clamp_rate, VARIANCE_FLOOR};
use super::{DiagonalDistribution, DiffusionKind};

/// One factorized distribution per row of a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum DiagonalBatch {
    Gaussian { mean: Array2<f64>, var: Array2<f64> },
    Bernoulli { rate: Array2<f64> },
}

impl DiagonalBatch {
    pub fn kind(&self) -> DiffusionKind {
        match self {
            Self::Gaussian { .. } => DiffusionKind::Gaussian,
            Self::Bernoulli { .. } => DiffusionKind::Binomial,
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            Self::Gaussian { mean, .. } => mean.nrows(),
            Self::Bernoulli { rate } => rate.nrows(),
        }
    }

    pub fn row(&self, i: usize) -> DiagonalDistribution {
        match self {
            Self::Gaussian { mean, var } => DiagonalDistribution::Gaussian {
                mean: mean.row(i).to_vec(),
                var: var.row(i).to_vec(),
            },
            Self::Bernoulli { rate } => DiagonalDistribution::Bernoulli {
                rate: rate.row(i).to_vec(),
            },
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Array2<f64> {
        match self {
            Self::Gaussian { mean, var } => {
                let mut out = mean.clone();
                Zip::from(&mut out)
                    .and(var)
                    .for_each(|m, v| *m += v.sqrt() * rng.sample::<f64, _>(StandardNormal));
                out
            }
            Self::Bernoulli { rate } => rate.mapv(|r| if rng.random::<f64>() < r { 1.0 } else { 0.0 }),
        }
    }

    /// Row-wise log density (or log mass) of `x`.
    pub fn log_prob_rows(&self, x: &Array2<f64>) -> Vec<f64> {
        match self {
            Self::Gaussian { mean, var } => {
                let mut lp = Array2::zeros(mean.dim());
                Zip::from(&mut lp).and(mean).and(var).and(x).for_each(|o, m, v, x| {
                    let v = v.max(VARIANCE_FLOOR);
                    *o = -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (x - m).powi(2) / v);
                });
                lp.sum_axis(Axis(1)).to_vec()
            }
            Self::Bernoulli { rate } => {
                let mut lp = Array2::zeros(rate.dim());
                Zip::from(&mut lp).and(rate).and(x).for_each(|o, &r, &x| {
                    let r = clamp_rate(r);
                    *o = if x > 0.5 { r.ln() } else { (1.0 - r).ln() };
                });
                lp.sum_axis(Axis(1)).to_vec()
            }
        }
    }
}

/// The forward kernel with rate `beta` applied to every row of `x`.
pub fn forward_kernel_batch(kind: DiffusionKind, x: &Array2<f64>, beta: f64) -> DiagonalBatch {
    match kind {
        DiffusionKind::Gaussian => DiagonalBatch::Gaussian {
            mean: x * (1.0 - beta).sqrt(),
            var: Array2::from_elem(x.dim(), beta.max(VARIANCE_FLOOR)),
        },
        DiffusionKind::Binomial => DiagonalBatch::Bernoulli {
            rate: x.mapv(|x| x * (1.0 - beta) + 0.5 * beta),
        },
    }
}
