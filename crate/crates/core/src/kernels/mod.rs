//! Diffusion-rate schedules, the forward Markov kernels, their closed-form
//! marginals and posteriors, and the divergence/entropy toolbox.

mod batch;
mod distribution;
mod schedule;

use std::fmt;

use rand::Rng;

use crate::error::{invalid, Result};

pub use batch::{forward_kernel_batch, DiagonalBatch};
pub use distribution::{
    binary_entropy, entropy, kl_divergence, to_bits, DiagonalDistribution, RATE_FLOOR, VARIANCE_FLOOR,
};
pub(crate) use distribution::clamp_rate;
pub use schedule::{fixed_rule, make_schedule, Schedule, ScheduleMode, LEARNABLE_BETA_MAX};

/// Which family of diffusion a process uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DiffusionKind {
    /// Gaussian diffusion into `N(0, I)`.
    Gaussian,
    /// Binomial diffusion into independent `Bernoulli(0.5)` bits.
    Binomial,
}

impl fmt::Display for DiffusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gaussian => "gaussian",
            Self::Binomial => "binomial",
        })
    }
}

impl std::str::FromStr for DiffusionKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "binomial" => Ok(Self::Binomial),
            other => Err(invalid(format!("unknown diffusion kind '{other}'"))),
        }
    }
}

/// A forward process: schedule plus data dimension. The equilibrium
/// distribution is implied by the schedule kind.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSpec {
    pub schedule: Schedule,
    pub dim: usize,
}

impl DiffusionSpec {
    pub fn new(schedule: Schedule, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("data dimension must be positive"));
        }
        Ok(Self { schedule, dim })
    }

    pub fn kind(&self) -> DiffusionKind {
        self.schedule.kind()
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.schedule.beta(t)
    }

    /// The equilibrium distribution `pi`.
    pub fn equilibrium(&self) -> DiagonalDistribution {
        match self.kind() {
            DiffusionKind::Gaussian => DiagonalDistribution::Gaussian {
                mean: vec![0.0; self.dim],
                var: vec![1.0; self.dim],
            },
            DiffusionKind::Binomial => DiagonalDistribution::Bernoulli {
                rate: vec![0.5; self.dim],
            },
        }
    }

    pub(crate) fn check_step(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            return Err(invalid(format!("step t = {t} outside [{lo}, {}]", self.steps())));
        }
        Ok(())
    }

    pub(crate) fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(invalid(format!("state has dimension {}, expected {}", x.len(), self.dim)));
        }
        match self.kind() {
            DiffusionKind::Gaussian if x.iter().any(|v| !v.is_finite()) => Err(invalid("non-finite state")),
            DiffusionKind::Binomial if x.iter().any(|&v| v != 0.0 && v != 1.0) => {
                Err(invalid("binomial states must be 0/1"))
            }
            _ => Ok(()),
        }
    }
}

/// The forward kernel `T_pi(. | x_prev; beta_t)` as a distribution.
pub fn forward_kernel(spec: &DiffusionSpec, x_prev: &[f64], t: usize) -> Result<DiagonalDistribution> {
    spec.check_step(t, 1)?;
    spec.check_state(x_prev)?;
    Ok(kernel_with_rate(spec.kind(), x_prev, spec.beta(t)))
}

pub(crate) fn kernel_with_rate(kind: DiffusionKind, x_prev: &[f64], beta: f64) -> DiagonalDistribution {
    match kind {
        DiffusionKind::Gaussian => {
            let keep = (1.0 - beta).sqrt();
            DiagonalDistribution::Gaussian {
                mean: x_prev.iter().map(|x| x * keep).collect(),
                var: vec![beta.max(VARIANCE_FLOOR); x_prev.len()],
            }
        }
        DiffusionKind::Binomial => DiagonalDistribution::Bernoulli {
            rate: x_prev.iter().map(|x| x * (1.0 - beta) + 0.5 * beta).collect(),
        },
    }
}

/// One forward diffusion step from `x^(t-1)` to a sample of `x^(t)`.
pub fn forward_step<R: Rng + ?Sized>(spec: &DiffusionSpec, x_prev: &[f64], t: usize, rng: &mut R) -> Result<Vec<f64>> {
    spec.check_step(t, 1)?;
    spec.check_state(x_prev)?;
    let beta = spec.beta(t);
    if spec.kind() == DiffusionKind::Gaussian && beta == 0.0 {
        return Ok(x_prev.to_vec());
    }
    Ok(kernel_with_rate(spec.kind(), x_prev, beta).sample(rng))
}

/// Closed-form `q(x^(t) | x^(0))`.
pub fn forward_marginal(spec: &DiffusionSpec, x0: &[f64], t: usize) -> Result<DiagonalDistribution> {
    spec.check_step(t, 1)?;
    spec.check_state(x0)?;
    Ok(marginal_unchecked(spec, x0, t))
}

pub(crate) fn marginal_unchecked(spec: &DiffusionSpec, x0: &[f64], t: usize) -> DiagonalDistribution {
    let c = spec.schedule.cumulative(t);
    match spec.kind() {
        DiffusionKind::Gaussian => DiagonalDistribution::Gaussian {
            mean: x0.iter().map(|x| x * c.sqrt()).collect(),
            var: vec![(1.0 - c).max(VARIANCE_FLOOR); x0.len()],
        },
        DiffusionKind::Binomial => DiagonalDistribution::Bernoulli {
            rate: x0.iter().map(|x| marginal_rate(c, *x)).collect(),
        },
    }
}

/// `gamma_t x0 + (1 - gamma_t) / 2`
pub(crate) fn marginal_rate(gamma: f64, x0: f64) -> f64 {
    gamma * x0 + 0.5 * (1.0 - gamma)
}

/// Probability that `x^(t-1) = 1` given the observed bit `xt`, the marginal
/// rate `m` of `x^(t-1)` and the step rate `beta`.
pub(crate) fn binomial_posterior_rate(m: f64, xt: f64, beta: f64) -> f64 {
    let stay = 1.0 - 0.5 * beta;
    let flip = 0.5 * beta;
    let (k1, k0) = if xt > 0.5 { (stay, flip) } else { (flip, stay) };
    let num = m * k1;
    num / (num + (1.0 - m) * k0)
}

/// Gaussian posterior coefficients for `q(x^(t-1) | x^(t), x^(0))`:
/// mean `= a * x^(t) + b * x^(0)`, variance `v`.
pub(crate) fn gaussian_posterior_coefficients(schedule: &Schedule, t: usize) -> (f64, f64, f64) {
    let beta = schedule.beta(t);
    let prev = schedule.alpha_bar(t - 1);
    let cur = schedule.alpha_bar(t);
    let denom = 1.0 - cur;
    let a = (1.0 - beta).sqrt() * (1.0 - prev) / denom;
    let b = prev.sqrt() * beta / denom;
    let v = beta * (1.0 - prev) / denom;
    (a, b, v)
}

/// Closed-form `q(x^(t-1) | x^(t), x^(0))` for `2 <= t <= T`.
pub fn forward_posterior(spec: &DiffusionSpec, x0: &[f64], xt: &[f64], t: usize) -> Result<DiagonalDistribution> {
    if t == 1 {
        return Err(invalid("the t = 1 reverse step is fixed by the edge rule"));
    }
    spec.check_step(t, 2)?;
    spec.check_state(x0)?;
    spec.check_state(xt)?;
    Ok(match spec.kind() {
        DiffusionKind::Gaussian => {
            let (a, b, v) = gaussian_posterior_coefficients(&spec.schedule, t);
            DiagonalDistribution::Gaussian {
                mean: xt.iter().zip(x0).map(|(xt, x0)| a * xt + b * x0).collect(),
                var: vec![v.max(VARIANCE_FLOOR); spec.dim],
            }
        }
        DiffusionKind::Binomial => {
            let gamma = spec.schedule.gamma(t - 1);
            let beta = spec.beta(t);
            DiagonalDistribution::Bernoulli {
                rate: x0
                    .iter()
                    .zip(xt)
                    .map(|(&x0, &xt)| binomial_posterior_rate(marginal_rate(gamma, x0), xt, beta))
                    .collect(),
            }
        }
    })
}
