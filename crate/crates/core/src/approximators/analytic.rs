use ndarray::Array2;
use rand::RngCore;

use crate::autodiff::Tape;
use crate::error::Result;
use crate::kernels::{DiffusionKind, RATE_FLOOR};

use super::params::{Layout, ParamSource, ParameterVector};
use super::{KernelQuery, KernelVars, ModelBuilder, ModelConfig, ReverseModel};

/// Parameter-free reverse kernel with the forward kernel's form:
/// `N(x sqrt(1 - beta_t), beta_t)` or rate `x (1 - beta_t) + beta_t / 2`.
/// It is the exact reversal when the data already follow the equilibrium
/// distribution.
#[derive(Debug, Clone)]
pub struct AnalyticReverseModel {
    config: ModelConfig,
    params: ParameterVector,
}

impl AnalyticReverseModel {
    pub fn new(config: ModelConfig) -> Self {
        Self {
            config,
            params: ParameterVector::zeros(Layout::new()),
        }
    }
}

impl ReverseModel for AnalyticReverseModel {
    fn name(&self) -> &'static str {
        "analytic"
    }

    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn parameters(&self) -> &ParameterVector {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut ParameterVector {
        &mut self.params
    }

    fn record(&self, tape: &mut Tape, _src: &ParamSource, queries: &[KernelQuery]) -> Vec<KernelVars> {
        queries
            .iter()
            .map(|q| match self.config.kind {
                DiffusionKind::Gaussian => {
                    let keep = tape.one_minus(q.beta);
                    let keep = tape.sqrt(keep);
                    let mean = tape.mul(q.x, keep);
                    let log_var = tape.ln(q.beta);
                    KernelVars::Gaussian {
                        mean,
                        var: q.beta,
                        log_var,
                    }
                }
                DiffusionKind::Binomial => {
                    let centered = tape.shift(q.x, -0.5);
                    let pull = tape.mul(centered, q.beta);
                    let rate = tape.sub(q.x, pull);
                    let rate = tape.clamp(rate, RATE_FLOOR, 1.0 - RATE_FLOOR);
                    let lr = tape.ln(rate);
                    let other = tape.one_minus(rate);
                    let lo = tape.ln(other);
                    let logit = tape.sub(lr, lo);
                    KernelVars::Bernoulli { logit }
                }
            })
            .collect()
    }

    fn clone_box(&self) -> Box<dyn ReverseModel> {
        Box::new(self.clone())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AnalyticBuilder;

impl ModelBuilder for AnalyticBuilder {
    fn name(&self) -> &'static str {
        "analytic"
    }

    fn supports(&self, _kind: DiffusionKind) -> bool {
        true
    }

    fn build(
        &self,
        config: &ModelConfig,
        _init_data: Option<&Array2<f64>>,
        _rng: &mut dyn RngCore,
    ) -> Result<Box<dyn ReverseModel>> {
        Ok(Box::new(AnalyticReverseModel::new(config.clone())))
    }
}
