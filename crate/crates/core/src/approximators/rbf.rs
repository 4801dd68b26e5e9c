use ndarray::Array2;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::autodiff::Tape;
use crate::error::Result;
use crate::kernels::DiffusionKind;

use super::params::{Block, Layout, ParamSource, ParameterVector};
use super::readout::{record_readout, record_readout_transform};
use super::{KernelQuery, KernelVars, ModelBuilder, ModelConfig, ReverseModel};

const DEFAULT_BASES: usize = 16;

/// Normalized radial-basis network for Gaussian reverse kernels. The hidden
/// activations are shared by every step and by both outputs; each readout maps
/// them to `z_mu` and `z_sigma`, which pass through the readout transform.
#[derive(Debug, Clone)]
pub struct RbfReverseModel {
    config: ModelConfig,
    params: ParameterVector,
    centers: usize,
    log_width: usize,
    mu_readouts: Vec<usize>,
    sigma_readouts: Vec<usize>,
}

impl RbfReverseModel {
    pub fn new(config: ModelConfig) -> Self {
        let bases = config.hidden.first().copied().unwrap_or(DEFAULT_BASES);
        let d = config.dim;
        let mut layout = Layout::new();
        let centers = layout.push("centers", bases, d);
        let log_width = layout.push("log_width", 1, bases);
        let count = config.readout.count(config.steps);
        let mu_readouts = (0..count).map(|k| layout.push(format!("mu_readout_{k}"), bases, d)).collect();
        let sigma_readouts = (0..count)
            .map(|k| layout.push(format!("sigma_readout_{k}"), bases, d))
            .collect();
        Self {
            config,
            params: ParameterVector::zeros(layout),
            centers,
            log_width,
            mu_readouts,
            sigma_readouts,
        }
    }

    pub fn bases(&self) -> usize {
        self.params.layout().block(self.centers).rows
    }

    fn blocks(&self, ids: &[usize]) -> Vec<Block> {
        ids.iter().map(|&i| self.params.layout().block(i).clone()).collect()
    }

    /// Places centers on `points` and sets every width to the median
    /// distance between distinct centers.
    fn initialize(&mut self, points: &Array2<f64>) {
        let h = self.bases();
        self.params
            .block_values_mut(self.centers)
            .copy_from_slice(points.as_slice().expect("contiguous"));
        let mut dists = Vec::new();
        for i in 0..h {
            for j in i + 1..h {
                let dd: f64 = points
                    .row(i)
                    .iter()
                    .zip(points.row(j).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                dists.push(dd.sqrt());
            }
        }
        dists.sort_by(f64::total_cmp);
        let median = if dists.is_empty() { 1.0 } else { dists[dists.len() / 2] };
        let lw = median.max(1e-3).ln();
        self.params.block_values_mut(self.log_width).fill(lw);
    }
}

impl ReverseModel for RbfReverseModel {
    fn name(&self) -> &'static str {
        "rbf"
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
        let c = src.leaf(tape, layout.block(self.centers));
        let lw = src.leaf(tape, layout.block(self.log_width));
        let lw2 = tape.scale(lw, -2.0);
        let prec = tape.exp(lw2);
        let neg_half_prec = tape.scale(prec, -0.5);
        let mu_blocks = self.blocks(&self.mu_readouts);
        let sigma_blocks = self.blocks(&self.sigma_readouts);
        let steps = self.config.steps;
        queries
            .iter()
            .map(|q| {
                let d2 = tape.sq_dist(q.x, c);
                let logits = tape.mul(d2, neg_half_prec);
                let h = tape.softmax_rows(logits);
                let wm = record_readout(tape, src, &mu_blocks, self.config.readout, q.t, steps);
                let ws = record_readout(tape, src, &sigma_blocks, self.config.readout, q.t, steps);
                let z_mu = tape.matmul(h, wm);
                let z_sigma = tape.matmul(h, ws);
                record_readout_transform(tape, z_mu, z_sigma, q.x, q.beta)
            })
            .collect()
    }

    fn clone_box(&self) -> Box<dyn ReverseModel> {
        Box::new(self.clone())
    }
}

/// Builds [`RbfReverseModel`]s; centers are drawn from the training points
/// (or a standard normal without data) and readouts start at zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct RbfBuilder;

impl ModelBuilder for RbfBuilder {
    fn name(&self) -> &'static str {
        "rbf"
    }

    fn supports(&self, kind: DiffusionKind) -> bool {
        kind == DiffusionKind::Gaussian
    }

    fn build(
        &self,
        config: &ModelConfig,
        init_data: Option<&Array2<f64>>,
        rng: &mut dyn RngCore,
    ) -> Result<Box<dyn ReverseModel>> {
        let mut model = RbfReverseModel::new(config.clone());
        let h = model.bases();
        let d = config.dim;
        let mut points = Array2::<f64>::zeros((h, d));
        match init_data {
            Some(data) if data.nrows() > 0 => {
                if data.ncols() != d {
                    return Err(crate::error::invalid("initialization data has the wrong dimension"));
                }
                let picks = rand::seq::index::sample(rng, data.nrows(), h.min(data.nrows())).into_vec();
                for (k, row) in (0..h).zip(picks.iter().cycle()) {
                    points.row_mut(k).assign(&data.row(*row));
                }
            }
            _ => points.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal)),
        }
        model.initialize(&points);
        Ok(Box::new(model))
    }
}
