use crate::autodiff::sigmoid;
use crate::error::{invalid, Result};

use super::DiffusionKind;

/// Upper cap applied to initial learnable rates, since a logistic
/// parameterization cannot represent a rate of exactly 1.
pub const LEARNABLE_BETA_MAX: f64 = 1.0 - 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleMode {
    Fixed,
    Learnable,
}

impl std::str::FromStr for ScheduleMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "learnable" => Ok(Self::Learnable),
            other => Err(invalid(format!("unknown schedule mode '{other}'"))),
        }
    }
}

/// Diffusion rates `beta_1..beta_T` with their cumulative products
/// `prod_{s<=t} (1 - beta_s)` (called alpha-bar for Gaussian and gamma for
/// binomial diffusion).
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    kind: DiffusionKind,
    beta: Vec<f64>,
    cumulative: Vec<f64>,
    /// Unconstrained parameters for `beta_2..beta_T` when learnable.
    logits: Option<Vec<f64>>,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// The fixed rule `beta_t = 1 / (T - t + 1)`, which erases a constant
/// fraction `1/T` of the original signal per step.
pub fn fixed_rule(steps: usize, t: usize) -> f64 {
    1.0 / (steps - t + 1) as f64
}

/// Builds a schedule.
///
/// Fixed mode uses [`fixed_rule`] for every step. Learnable mode pins
/// `beta_1 = beta1` and starts `beta_2..beta_T` at the fixed rule (capped at
/// [`LEARNABLE_BETA_MAX`]), stored as logits.
pub fn make_schedule(kind: DiffusionKind, steps: usize, beta1: f64, mode: ScheduleMode) -> Result<Schedule> {
    if steps == 0 {
        return Err(invalid("schedule needs at least one step"));
    }
    if !(beta1 > 0.0 && beta1 < 1.0) {
        return Err(invalid(format!("beta1 = {beta1} must lie in (0, 1)")));
    }
    match mode {
        ScheduleMode::Fixed => {
            let beta = (1..=steps).map(|t| fixed_rule(steps, t)).collect();
            Schedule::from_parts(kind, beta, None)
        }
        ScheduleMode::Learnable => {
            if kind == DiffusionKind::Binomial {
                return Err(crate::Error::Unsupported(
                    "learnable schedules need frozen-noise gradients, unavailable for binomial diffusion".into(),
                ));
            }
            let logits: Vec<f64> = (2..=steps)
                .map(|t| logit(fixed_rule(steps, t).min(LEARNABLE_BETA_MAX)))
                .collect();
            Schedule::learnable(kind, beta1, logits)
        }
    }
}

impl Schedule {
    /// Rebuilds a schedule from explicit rates (and logits, when learnable).
    pub fn from_parts(kind: DiffusionKind, beta: Vec<f64>, logits: Option<Vec<f64>>) -> Result<Self> {
        if beta.is_empty() {
            return Err(invalid("empty schedule"));
        }
        if let Some(&bad) = beta.iter().find(|&&b| !(b > 0.0 && b <= 1.0)) {
            return Err(invalid(format!("diffusion rate {bad} outside (0, 1]")));
        }
        if let Some(l) = &logits {
            if l.len() + 1 != beta.len() {
                return Err(invalid("logit count must be T - 1"));
            }
            return Self::learnable(kind, beta[0], l.clone());
        }
        let cumulative = cumulative_products(&beta);
        Ok(Self {
            kind,
            beta,
            cumulative,
            logits: None,
        })
    }

    fn learnable(kind: DiffusionKind, beta1: f64, logits: Vec<f64>) -> Result<Self> {
        if logits.iter().any(|u| !u.is_finite()) {
            return Err(invalid("non-finite schedule logit"));
        }
        let mut beta = Vec::with_capacity(logits.len() + 1);
        beta.push(beta1);
        beta.extend(logits.iter().map(|&u| sigmoid(u)));
        if let Some(&bad) = beta.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(invalid(format!("learnable rate {bad} saturated")));
        }
        let cumulative = cumulative_products(&beta);
        Ok(Self {
            kind,
            beta,
            cumulative,
            logits: Some(logits),
        })
    }

    pub fn kind(&self) -> DiffusionKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn mode(&self) -> ScheduleMode {
        if self.logits.is_some() {
            ScheduleMode::Learnable
        } else {
            ScheduleMode::Fixed
        }
    }

    pub fn is_learnable(&self) -> bool {
        self.logits.is_some()
    }

    /// `beta_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// `prod_{s<=t}(1 - beta_s)`, with the empty product at `t = 0`.
    pub fn cumulative(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.cumulative[t - 1]
        }
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.cumulative(t)
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.cumulative(t)
    }

    pub fn logits(&self) -> Option<&[f64]> {
        self.logits.as_deref()
    }

    /// Replaces the learnable logits and recomputes the rates.
    pub fn set_logits(&mut self, logits: &[f64]) -> Result<()> {
        if self.logits.is_none() {
            return Err(invalid("schedule is not learnable"));
        }
        if logits.len() + 1 != self.beta.len() {
            return Err(invalid("logit count must be T - 1"));
        }
        *self = Self::learnable(self.kind, self.beta[0], logits.to_vec())?;
        Ok(())
    }
}

fn cumulative_products(beta: &[f64]) -> Vec<f64> {
    let mut acc = 1.0;
    beta.iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect()
}
