//! Parameterized reverse-kernel families behind a common trait, a name-keyed
//! registry of builders, and gradient utilities.

mod analytic;
mod gradcheck;
mod mlp;
mod params;
mod rbf;
mod readout;

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array2;
use rand::RngCore;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::kernels::{DiagonalBatch, DiagonalDistribution, DiffusionKind};

pub use analytic::{AnalyticBuilder, AnalyticReverseModel};
pub use gradcheck::{evaluate_with_gradients, finite_difference_check};
pub use mlp::{MlpBuilder, MlpReverseModel};
pub use params::{Block, Layout, ParamSource, ParameterVector};
pub use rbf::{RbfBuilder, RbfReverseModel};
pub use readout::{bump_basis, readout_transform, record_readout_transform, ReadoutMode};

/// Reverse-kernel parameters recorded on a tape, one row per query state.
#[derive(Debug, Clone, Copy)]
pub enum KernelVars {
    /// Per-dimension moments. `var` and `log_var` may be `1×1` when shared.
    Gaussian { mean: Var, var: Var, log_var: Var },
    /// Bernoulli rates as logits.
    Bernoulli { logit: Var },
}

/// One batch of states `x` (`n×d`) at step `t`, with the step's rate `beta`
/// (`1×1`, possibly depending on schedule parameters).
#[derive(Debug, Clone, Copy)]
pub struct KernelQuery {
    pub t: usize,
    pub x: Var,
    pub beta: Var,
}

/// Hyperparameters shared by every model family.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: DiffusionKind,
    pub dim: usize,
    pub steps: usize,
    /// Hidden layer sizes (first entry is the basis count for RBF models).
    pub hidden: Vec<usize>,
    pub readout: ReadoutMode,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.steps == 0 {
            return Err(invalid("model needs positive dimension and step count"));
        }
        if self.hidden.contains(&0) {
            return Err(invalid("hidden sizes must be positive"));
        }
        if let ReadoutMode::Bump(0) = self.readout {
            return Err(invalid("bump readout needs at least one bump"));
        }
        Ok(())
    }
}

/// A learned (or closed-form) reverse kernel `p(x^(t-1) | x^(t))`.
pub trait ReverseModel: fmt::Debug + Send + Sync {
    /// Registry name of the family.
    fn name(&self) -> &'static str;
    fn config(&self) -> &ModelConfig;
    fn parameters(&self) -> &ParameterVector;
    fn parameters_mut(&mut self) -> &mut ParameterVector;
    /// Records the kernel for every query; shared weights are recorded once.
    fn record(&self, tape: &mut Tape, src: &ParamSource, queries: &[KernelQuery]) -> Vec<KernelVars>;
    fn clone_box(&self) -> Box<dyn ReverseModel>;

    fn kind(&self) -> DiffusionKind {
        self.config().kind
    }

    fn dim(&self) -> usize {
        self.config().dim
    }

    fn steps(&self) -> usize {
        self.config().steps
    }

    fn n_params(&self) -> usize {
        self.parameters().values().len()
    }
}

impl Clone for Box<dyn ReverseModel> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Creates models of one family.
pub trait ModelBuilder: Send + Sync {
    fn name(&self) -> &'static str;
    fn supports(&self, kind: DiffusionKind) -> bool;
    /// Builds a freshly initialized model. `init_data` (training points) is
    /// used by families that seed weights from data.
    fn build(
        &self,
        config: &ModelConfig,
        init_data: Option<&Array2<f64>>,
        rng: &mut dyn RngCore,
    ) -> Result<Box<dyn ReverseModel>>;
}

/// Model families addressable by name.
pub struct ModelRegistry {
    builders: BTreeMap<&'static str, Box<dyn ModelBuilder>>,
}

impl fmt::Debug for ModelRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.builders.keys()).finish()
    }
}

impl ModelRegistry {
    pub fn empty() -> Self {
        Self {
            builders: BTreeMap::new(),
        }
    }

    /// Registry holding `rbf`, `mlp`, `mlp-forward` and `analytic`.
    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(RbfBuilder));
        r.register(Box::new(MlpBuilder::default()));
        r.register(Box::new(MlpBuilder { forward_offset: true }));
        r.register(Box::new(AnalyticBuilder));
        r
    }

    pub fn register(&mut self, builder: Box<dyn ModelBuilder>) {
        self.builders.insert(builder.name(), builder);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.builders.keys().copied().collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn ModelBuilder> {
        self.builders
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| invalid(format!("unknown model '{name}' (known: {})", self.names().join(", "))))
    }

    pub fn build(
        &self,
        name: &str,
        config: &ModelConfig,
        init_data: Option<&Array2<f64>>,
        rng: &mut dyn RngCore,
    ) -> Result<Box<dyn ReverseModel>> {
        config.validate()?;
        let builder = self.get(name)?;
        if !builder.supports(config.kind) {
            return Err(Error::Unsupported(format!("model '{name}' does not support {} diffusion", config.kind)));
        }
        builder.build(config, init_data, rng)
    }

    /// Rebuilds a model and overwrites its parameters with `values`.
    pub fn restore(&self, name: &str, config: &ModelConfig, values: &[f64]) -> Result<Box<dyn ReverseModel>> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = self.build(name, config, None, &mut rng)?;
        let params = model.parameters_mut();
        if params.values().len() != values.len() {
            return Err(invalid(format!(
                "model '{name}' expects {} parameters, found {}",
                params.values().len(),
                values.len()
            )));
        }
        params.values_mut().copy_from_slice(values);
        Ok(model)
    }
}

/// Converts recorded kernel parameters to plain values.
pub fn kernel_batch(tape: &Tape, vars: &KernelVars) -> DiagonalBatch {
    match *vars {
        KernelVars::Gaussian { mean, var, .. } => {
            let mean = tape.value(mean).to_owned();
            let var = tape
                .value(var)
                .broadcast(mean.dim())
                .expect("variance broadcasts over the mean")
                .to_owned();
            DiagonalBatch::Gaussian { mean, var }
        }
        KernelVars::Bernoulli { logit } => DiagonalBatch::Bernoulli {
            rate: tape.value(logit).mapv(crate::autodiff::sigmoid),
        },
    }
}

fn check_batch(model: &dyn ReverseModel, x: &Array2<f64>, t: usize) -> Result<()> {
    if x.ncols() != model.dim() {
        return Err(invalid(format!("state dimension {} but model expects {}", x.ncols(), model.dim())));
    }
    if t == 0 || t > model.steps() {
        return Err(invalid(format!("t = {t} outside [1, {}]", model.steps())));
    }
    Ok(())
}

/// Evaluates the reverse kernel at every row of `x` (no gradients).
pub fn reverse_apply_batch(model: &dyn ReverseModel, x: &Array2<f64>, t: usize, beta_t: f64) -> Result<DiagonalBatch> {
    check_batch(model, x, t)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let beta = tape.scalar_const(beta_t);
    let src = ParamSource::frozen(model.parameters().values());
    let vars = model.record(&mut tape, &src, &[KernelQuery { t, x: xv, beta }]);
    tape.check_finite()?;
    Ok(kernel_batch(&tape, &vars[0]))
}

/// The reverse kernel at a single state.
pub fn reverse_apply(model: &dyn ReverseModel, x_t: &[f64], t: usize, beta_t: f64) -> Result<DiagonalDistribution> {
    let x = Array2::from_shape_vec((1, x_t.len()), x_t.to_vec()).unwrap();
    Ok(reverse_apply_batch(model, &x, t, beta_t)?.row(0))
}
