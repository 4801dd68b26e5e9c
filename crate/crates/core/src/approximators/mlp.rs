use ndarray::Array2;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::kernels::{DiffusionKind, RATE_FLOOR};

use super::params::{Block, Layout, ParamSource, ParameterVector};
use super::readout::record_readout;
use super::{KernelQuery, KernelVars, ModelBuilder, ModelConfig, ReverseModel};

const DEFAULT_HIDDEN: [usize; 3] = [50, 50, 50];

/// Multilayer perceptron for binomial reverse kernels. Sigmoid hidden layers
/// see the state recoded to `2x - 1` and are shared across steps; each step's
/// readout produces the Bernoulli logits. With `forward_offset` the logits are
/// added to the logit of the forward kernel's rate at `x`, so a zero readout
/// reproduces the forward kernel instead of the rate 0.5.
#[derive(Debug, Clone)]
pub struct MlpReverseModel {
    config: ModelConfig,
    forward_offset: bool,
    params: ParameterVector,
    layers: Vec<(usize, usize)>,
    readout_w: Vec<usize>,
    readout_b: Vec<usize>,
}

impl MlpReverseModel {
    pub fn new(config: ModelConfig) -> Self {
        Self::with_offset(config, false)
    }

    pub fn with_offset(config: ModelConfig, forward_offset: bool) -> Self {
        let hidden = if config.hidden.is_empty() {
            DEFAULT_HIDDEN.to_vec()
        } else {
            config.hidden.clone()
        };
        let d = config.dim;
        let mut layout = Layout::new();
        let mut fan_in = d;
        let layers = hidden
            .iter()
            .enumerate()
            .map(|(l, &h)| {
                let w = layout.push(format!("hidden_{l}_w"), fan_in, h);
                let b = layout.push(format!("hidden_{l}_b"), 1, h);
                fan_in = h;
                (w, b)
            })
            .collect();
        let count = config.readout.count(config.steps);
        let readout_w = (0..count).map(|k| layout.push(format!("readout_{k}_w"), fan_in, d)).collect();
        let readout_b = (0..count).map(|k| layout.push(format!("readout_{k}_b"), 1, d)).collect();
        Self {
            config,
            forward_offset,
            params: ParameterVector::zeros(layout),
            layers,
            readout_w,
            readout_b,
        }
    }

    fn blocks(&self, ids: &[usize]) -> Vec<Block> {
        ids.iter().map(|&i| self.params.layout().block(i).clone()).collect()
    }
}

impl ReverseModel for MlpReverseModel {
    fn name(&self) -> &'static str {
        if self.forward_offset {
            "mlp-forward"
        } else {
            "mlp"
        }
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

    fn record(&self, tape: &mut Tape, src: &ParamSource, queries: &[KernelQuery]) -> Vec<KernelVars> {
        let layout = self.params.layout();
        let layers: Vec<_> = self
            .layers
            .iter()
            .map(|&(w, b)| (src.leaf(tape, layout.block(w)), src.leaf(tape, layout.block(b))))
            .collect();
        let w_blocks = self.blocks(&self.readout_w);
        let b_blocks = self.blocks(&self.readout_b);
        let bound = ((1.0 - RATE_FLOOR) / RATE_FLOOR).ln();
        let inputs: Vec<Var> = queries.iter().map(|q| q.x).collect();
        let x = if inputs.len() == 1 { inputs[0] } else { tape.concat_rows(&inputs) };
        let scaled = tape.scale(x, 2.0);
        let signed_all = tape.shift(scaled, -1.0);
        let mut h_all = signed_all;
        for &(w, b) in &layers {
            let a = tape.matmul(h_all, w);
            let a = tape.add(a, b);
            h_all = tape.sigmoid(a);
        }
        let mut start = 0;
        queries
            .iter()
            .map(|q| {
                let rows = tape.shape(q.x).0;
                let (h, signed) = if queries.len() == 1 {
                    (h_all, signed_all)
                } else {
                    (tape.row_range(h_all, start, start + rows), tape.row_range(signed_all, start, start + rows))
                };
                start += rows;
                let w = record_readout(tape, src, &w_blocks, self.config.readout, q.t, self.config.steps);
                let b = record_readout(tape, src, &b_blocks, self.config.readout, q.t, self.config.steps);
                let z = tape.matmul(h, w);
                let mut z = tape.add(z, b);
                if self.forward_offset {
                    let lo = RATE_FLOOR;
                    let beta = tape.clamp(q.beta, lo, 1.0 - lo);
                    let half = tape.scale(beta, 0.5);
                    let stay = tape.one_minus(half);
                    let l_stay = tape.ln(stay);
                    let l_half = tape.ln(half);
                    let gap = tape.sub(l_stay, l_half);
                    let offset = tape.mul(signed, gap);
                    z = tape.add(z, offset);
                }
                let logit = tape.clamp(z, -bound, bound);
                KernelVars::Bernoulli { logit }
            })
            .collect()
    }

    fn clone_box(&self) -> Box<dyn ReverseModel> {
        Box::new(self.clone())
    }
}

/// Builds [`MlpReverseModel`]s: hidden weights drawn with scale
/// `1/sqrt(fan_in)`, biases and readouts zero (initial rate 0.5, or the
/// forward kernel when `forward_offset` is set).
#[derive(Debug, Clone, Copy, Default)]
pub struct MlpBuilder {
    pub forward_offset: bool,
}

impl ModelBuilder for MlpBuilder {
    fn name(&self) -> &'static str {
        if self.forward_offset {
            "mlp-forward"
        } else {
            "mlp"
        }
    }

    fn supports(&self, kind: DiffusionKind) -> bool {
        kind == DiffusionKind::Binomial
    }

    fn build(
        &self,
        config: &ModelConfig,
        _init_data: Option<&Array2<f64>>,
        rng: &mut dyn RngCore,
    ) -> Result<Box<dyn ReverseModel>> {
        let mut model = MlpReverseModel::with_offset(config.clone(), self.forward_offset);
        for &(w, _) in &model.layers.clone() {
            let fan_in = model.params.layout().block(w).rows as f64;
            for v in model.params.block_values_mut(w) {
                *v = rng.sample::<f64, _>(StandardNormal) / fan_in.sqrt();
            }
        }
        Ok(Box::new(model))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximators::{reverse_apply, ReadoutMode};
    use crate::kernels::DiagonalDistribution;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> Box<dyn ReverseModel> {
        let cfg = ModelConfig {
            kind: DiffusionKind::Binomial,
            dim: 20,
            steps: 4,
            hidden: vec![],
            readout: ReadoutMode::PerStep,
        };
        MlpBuilder::default().build(&cfg, None, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
    }

    #[test]
    fn default_architecture_and_zero_readout_rate() {
        let m = model();
        let layout = m.parameters().layout();
        assert_eq!(layout.find("hidden_0_w").unwrap().rows, 20);
        assert_eq!(layout.find("hidden_2_w").unwrap().cols, 50);
        assert_eq!(layout.find("readout_3_w").unwrap().rows, 50);
        let x: Vec<f64> = (0..20).map(|i| (i % 2) as f64).collect();
        let DiagonalDistribution::Bernoulli { rate } = reverse_apply(m.as_ref(), &x, 2, 0.3).unwrap() else {
            unreachable!()
        };
        assert!(rate.iter().all(|&r| r == 0.5));
    }

    #[test]
    fn hidden_weights_affect_every_step_and_readouts_one() {
        let mut m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in m.parameters_mut().values_mut() {
            *v += 0.2 * rng.sample::<f64, _>(StandardNormal);
        }
        let x: Vec<f64> = (0..20).map(|i| ((i / 3) % 2) as f64).collect();
        let eval = |m: &Box<dyn ReverseModel>| -> Vec<_> {
            (1..=4).map(|t| reverse_apply(m.as_ref(), &x, t, 0.3).unwrap()).collect()
        };
        let base = eval(&m);
        let rb = m.parameters().layout().find("readout_0_b").unwrap().offset;
        m.parameters_mut().values_mut()[rb] += 1.0;
        let local = eval(&m);
        for t in 0..4 {
            assert_eq!(base[t] != local[t], t == 0);
        }
        let hb = m.parameters().layout().find("hidden_1_b").unwrap().offset;
        m.parameters_mut().values_mut()[hb] += 1.0;
        let global = eval(&m);
        assert!(global.iter().zip(&local).all(|(a, b)| a != b));
        for d in &global {
            let DiagonalDistribution::Bernoulli { rate } = d else { unreachable!() };
            assert!(rate.iter().all(|&r| r > 0.0 && r < 1.0));
        }
    }

    #[test]
    fn forward_offset_zero_readout_is_forward_kernel() {
        let cfg = ModelConfig {
            kind: DiffusionKind::Binomial,
            dim: 6,
            steps: 3,
            hidden: vec![4],
            readout: ReadoutMode::PerStep,
        };
        let builder = MlpBuilder { forward_offset: true };
        let m = builder.build(&cfg, None, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(m.name(), "mlp-forward");
        let x = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        for beta in [1e-3, 0.3, 0.9] {
            let DiagonalDistribution::Bernoulli { rate } = reverse_apply(m.as_ref(), &x, 2, beta).unwrap() else {
                unreachable!()
            };
            for (r, xi) in rate.iter().zip(x) {
                assert!((r - (xi * (1.0 - beta) + 0.5 * beta)).abs() < 1e-12);
            }
        }
    }
}
