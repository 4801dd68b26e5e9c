//! The analytic lower bound `K` on the log likelihood, its per-term
//! breakdown, the frozen-noise reparameterization, and training by gradient
//! ascent.

mod bound;
mod train;

use std::f64::consts::LN_2;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::approximators::{reverse_apply_batch, ReverseModel};
use crate::error::{invalid, Error, Result};
use crate::kernels::{
    forward_kernel_batch, kernel_with_rate, make_schedule, DiagonalBatch, DiagonalDistribution, DiffusionKind,
    DiffusionSpec, Schedule,
};

pub use bound::{bound_terms, estimate_bound, record_bound, Auxiliary, BoundBreakdown, BoundGraph, BoundPlan, StepGroup};
pub use train::{train, LogRow, TrainConfig, TrainReport};

/// A forward process paired with a reverse model. The trainable parameter
/// vector is the model's parameters followed by the schedule logits (when the
/// schedule is learnable).
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub spec: DiffusionSpec,
    pub model: Box<dyn ReverseModel>,
}

impl DiffusionModel {
    pub fn new(spec: DiffusionSpec, model: Box<dyn ReverseModel>) -> Result<Self> {
        if model.kind() != spec.kind() {
            return Err(Error::KindMismatch {
                expected: spec.kind().to_string(),
                found: model.kind().to_string(),
            });
        }
        if model.dim() != spec.dim || model.steps() != spec.steps() {
            return Err(invalid(format!(
                "model built for d = {}, T = {} but process has d = {}, T = {}",
                model.dim(),
                model.steps(),
                spec.dim,
                spec.steps()
            )));
        }
        Ok(Self { spec, model })
    }

    /// Pairs `spec` with the closed-form reverse kernel
    /// `p(x^(t-1) | x^(t)) = T_pi(x^(t-1) | x^(t); beta_t)`.
    pub fn analytic(spec: DiffusionSpec) -> Result<Self> {
        let config = crate::approximators::ModelConfig {
            kind: spec.kind(),
            dim: spec.dim,
            steps: spec.steps(),
            hidden: Vec::new(),
            readout: crate::approximators::ReadoutMode::PerStep,
        };
        Self::new(spec, Box::new(crate::approximators::AnalyticReverseModel::new(config)))
    }

    pub fn kind(&self) -> DiffusionKind {
        self.spec.kind()
    }

    pub fn steps(&self) -> usize {
        self.spec.steps()
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    /// Offset of the schedule logits in the combined parameter vector.
    pub fn schedule_offset(&self) -> usize {
        self.model.n_params()
    }

    pub fn n_params(&self) -> usize {
        self.model.n_params() + self.spec.schedule.logits().map_or(0, <[f64]>::len)
    }

    pub fn parameters(&self) -> Vec<f64> {
        let mut theta = self.model.parameters().values().to_vec();
        if let Some(l) = self.spec.schedule.logits() {
            theta.extend_from_slice(l);
        }
        theta
    }

    pub fn set_parameters(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(invalid(format!("expected {} parameters, found {}", self.n_params(), theta.len())));
        }
        let split = self.schedule_offset();
        if self.spec.schedule.is_learnable() {
            let schedule = Schedule::from_parts(
                self.kind(),
                self.spec.schedule.betas().to_vec(),
                Some(theta[split..].to_vec()),
            )?;
            self.spec.schedule = schedule;
        }
        self.model.parameters_mut().values_mut().copy_from_slice(&theta[..split]);
        Ok(())
    }

    /// The generative kernel `p(x^(t-1) | x^(t))` for every row of `x`: the
    /// model for `t >= 2` and the fixed edge rule for `t = 1`.
    pub fn reverse_batch(&self, x: &Array2<f64>, t: usize) -> Result<DiagonalBatch> {
        self.spec.check_step(t, 1)?;
        if t == 1 {
            if x.ncols() != self.dim() {
                return Err(invalid("state dimension mismatch"));
            }
            return Ok(forward_kernel_batch(self.kind(), x, self.spec.beta(1)));
        }
        reverse_apply_batch(self.model.as_ref(), x, t, self.spec.beta(t))
    }

    pub fn reverse_kernel(&self, x_t: &[f64], t: usize) -> Result<DiagonalDistribution> {
        let x = Array2::from_shape_vec((1, x_t.len()), x_t.to_vec()).unwrap();
        Ok(self.reverse_batch(&x, t)?.row(0))
    }
}

/// The untrained final reverse step `p(x^(0) | x^(1)) = T_pi(x^(0) | x^(1); beta_1)`.
pub fn edge_reverse_kernel(spec: &DiffusionSpec, x1: &[f64]) -> Result<DiagonalDistribution> {
    spec.check_state(x1)?;
    Ok(kernel_with_rate(spec.kind(), x1, spec.beta(1)))
}

/// Per-step standard-normal draws `eps_1..eps_T`, each `n×d`, fixed so that
/// trajectories are deterministic functions of the schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenNoise {
    eps: Vec<Array2<f64>>,
}

impl FrozenNoise {
    pub fn draw<R: Rng + ?Sized>(steps: usize, rows: usize, dim: usize, rng: &mut R) -> Self {
        let eps = (0..steps)
            .map(|_| Array2::from_shape_simple_fn((rows, dim), || rng.sample(StandardNormal)))
            .collect();
        Self { eps }
    }

    pub fn from_draws(eps: Vec<Array2<f64>>) -> Self {
        Self { eps }
    }

    pub fn steps(&self) -> usize {
        self.eps.len()
    }

    /// Noise for step `t` (1-indexed).
    pub fn step(&self, t: usize) -> &Array2<f64> {
        &self.eps[t - 1]
    }
}

/// Runs `x^(t) = sqrt(1 - beta_t) x^(t-1) + sqrt(beta_t) eps_t` for every row
/// of `x0`, returning `x^(1)..x^(T)`.
pub fn frozen_noise_trajectory(spec: &DiffusionSpec, x0: &Array2<f64>, noise: &FrozenNoise) -> Result<Vec<Array2<f64>>> {
    if spec.kind() == DiffusionKind::Binomial {
        return Err(Error::Unsupported(
            "frozen-noise trajectories need a continuous state space".into(),
        ));
    }
    if noise.steps() < spec.steps() {
        return Err(invalid("not enough frozen noise for every step"));
    }
    if x0.ncols() != spec.dim || noise.step(1).dim() != x0.dim() {
        return Err(invalid("frozen noise shape does not match the batch"));
    }
    let mut x = x0.clone();
    let mut states = Vec::with_capacity(spec.steps());
    for t in 1..=spec.steps() {
        let beta = spec.beta(t);
        x = &x * (1.0 - beta).sqrt() + noise.step(t) * beta.sqrt();
        states.push(x.clone());
    }
    Ok(states)
}

/// Mean `log2 pi(x^(0))` over the rows of `data`.
pub fn null_baseline(spec: &DiffusionSpec, data: &Array2<f64>) -> Result<f64> {
    if data.ncols() != spec.dim || data.nrows() == 0 {
        return Err(invalid("data shape does not match the process"));
    }
    let pi = spec.equilibrium();
    let total: f64 = data.rows().into_iter().map(|r| pi.log_prob(&r.to_vec())).sum();
    Ok(total / data.nrows() as f64 / LN_2)
}

/// Convenience: a fixed-rule process of `kind` with `steps` steps.
pub fn fixed_spec(kind: DiffusionKind, steps: usize, dim: usize) -> Result<DiffusionSpec> {
    DiffusionSpec::new(make_schedule(kind, steps, 0.5, crate::kernels::ScheduleMode::Fixed)?, dim)
}
