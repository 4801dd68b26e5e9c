use std::f64::consts::LN_2;
use std::ops::Range;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::approximators::ParamSource;
use crate::autodiff::Tape;
use crate::error::{invalid, Error, Result};

use super::bound::{record_bound, Auxiliary, BoundPlan};
use super::DiffusionModel;

/// Settings for gradient ascent on `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// The learning rate decays geometrically to this fraction of its start.
    pub final_lr_fraction: f64,
    /// Decay of the squared-gradient accumulator.
    pub rms_decay: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Steps `t` drawn per batch; 0 sums over every step.
    pub t_samples: usize,
    /// Update the schedule logits (when the schedule is learnable).
    pub learn_schedule: bool,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            steps: 1000,
            learning_rate: 1e-3,
            final_lr_fraction: 0.1,
            rms_decay: 0.95,
            epsilon: 1e-8,
            seed: 0,
            t_samples: 0,
            learn_schedule: true,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(invalid("batch size and log interval must be positive"));
        }
        if !(self.rms_decay > 0.0 && self.rms_decay < 1.0) {
            return Err(invalid("accumulator decay must lie in (0, 1)"));
        }
        if !(self.learning_rate > 0.0) || !(self.final_lr_fraction > 0.0) || !(self.epsilon > 0.0) {
            return Err(invalid("learning rate, final fraction and epsilon must be positive"));
        }
        Ok(())
    }

    fn learning_rate_at(&self, step: usize) -> f64 {
        let progress = step as f64 / self.steps.max(1) as f64;
        self.learning_rate * self.final_lr_fraction.powf(progress)
    }
}

/// One training-log line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub seconds: f64,
    /// Mean minibatch `K` over the interval, in bits.
    pub k_bits: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub steps: usize,
}

fn merge(mut ranges: Vec<Range<usize>>) -> Vec<Range<usize>> {
    ranges.sort_by_key(|r| r.start);
    let mut out: Vec<Range<usize>> = Vec::with_capacity(ranges.len());
    for r in ranges {
        match out.last_mut() {
            Some(last) if r.start <= last.end => last.end = last.end.max(r.end),
            _ => out.push(r),
        }
    }
    out
}

/// Maximizes `K` on `data` with a decayed squared-gradient (RMSprop-style)
/// ascent. Only parameters touched by a batch are updated, so per-step
/// readouts move only when their step is drawn. If `K` or its gradient stops
/// being finite, parameters are restored to the last logged step and
/// [`Error::Diverged`] is returned.
pub fn train(
    dm: &mut DiffusionModel,
    data: &Array2<f64>,
    config: &TrainConfig,
    on_log: &mut dyn FnMut(&LogRow),
) -> Result<TrainReport> {
    config.validate()?;
    if data.ncols() != dm.dim() || data.nrows() == 0 {
        return Err(invalid("training data do not match the model dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut theta = dm.parameters();
    let frozen_from = if dm.spec.schedule.is_learnable() && !config.learn_schedule {
        dm.schedule_offset()
    } else {
        theta.len()
    };
    let mut grad = vec![0.0; theta.len()];
    let mut acc = vec![0.0; theta.len()];
    let mut snapshot = (0, theta.clone());
    let mut log = Vec::new();
    let start = Instant::now();
    let (mut k_sum, mut k_count) = (0.0, 0usize);

    for step in 1..=config.steps {
        let rows: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..data.nrows())).collect();
        let x0 = data.select(Axis(0), &rows);
        let plan = if config.t_samples == 0 {
            BoundPlan::full(dm.steps(), x0.nrows())
        } else {
            BoundPlan::subsampled(dm.steps(), x0.nrows(), config.t_samples, &mut rng)?
        };
        let aux = Auxiliary::draw(dm, &x0, &plan, &mut rng);

        let mut tape = Tape::new();
        let outcome = record_bound(&mut tape, dm, &ParamSource::trainable(&theta), &x0, &plan, &aux)
            .and_then(|g| {
                let k = tape.scalar(g.total);
                if !k.is_finite() {
                    return Err(Error::NonFinite { node: "bound K".into() });
                }
                tape.backward_into(g.total, &mut grad).map(|r| (k, r))
            });
        let (k, touched) = match outcome {
            Ok(v) => v,
            Err(_) => {
                dm.set_parameters(&snapshot.1)?;
                return Err(Error::Diverged {
                    step,
                    last_good_step: snapshot.0,
                });
            }
        };

        let lr = config.learning_rate_at(step - 1);
        let mut norm2 = 0.0;
        for r in merge(touched) {
            for i in r {
                let g = std::mem::take(&mut grad[i]);
                if i >= frozen_from {
                    continue;
                }
                norm2 += g * g;
                acc[i] = if acc[i] == 0.0 {
                    g * g
                } else {
                    config.rms_decay * acc[i] + (1.0 - config.rms_decay) * g * g
                };
                theta[i] += lr * g / (acc[i].sqrt() + config.epsilon);
            }
        }

        k_sum += k;
        k_count += 1;
        if step % config.log_every == 0 || step == config.steps {
            let row = LogRow {
                step,
                seconds: start.elapsed().as_secs_f64(),
                k_bits: k_sum / k_count as f64 / LN_2,
                grad_norm: norm2.sqrt(),
            };
            on_log(&row);
            log.push(row);
            k_sum = 0.0;
            k_count = 0;
            snapshot = (step, theta.clone());
        }
    }
    dm.set_parameters(&theta)?;
    Ok(TrainReport {
        log,
        steps: config.steps,
    })
}
