use std::f64::consts::{E, LN_2, PI};

use ndarray::{Array2, Axis};
use rand::Rng;

use crate::approximators::{KernelQuery, KernelVars, ParamSource};
use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::kernels::{binary_entropy, binomial_posterior_rate, marginal_rate, DiffusionKind};

use super::{DiffusionModel, FrozenNoise};

/// The states at step `t` are drawn for the listed batch rows.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGroup {
    pub t: usize,
    pub rows: Vec<usize>,
}

/// Which `(t, datum)` pairs enter the KL sum, and the factor that makes the
/// sum an unbiased estimate of the sum over `t = 2..T`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundPlan {
    pub groups: Vec<StepGroup>,
    pub kl_scale: f64,
    full: bool,
}

impl BoundPlan {
    /// Every `t = 2..T` for every row.
    pub fn full(steps: usize, rows: usize) -> Self {
        let all: Vec<usize> = (0..rows).collect();
        Self {
            groups: (2..=steps).map(|t| StepGroup { t, rows: all.clone() }).collect(),
            kl_scale: 1.0,
            full: true,
        }
    }

    /// `draws` steps drawn uniformly from `2..T`, each paired with a disjoint
    /// share of the batch rows; the KL sum is scaled by `(T - 1) / draws`.
    pub fn subsampled<R: Rng + ?Sized>(steps: usize, rows: usize, draws: usize, rng: &mut R) -> Result<Self> {
        if draws == 0 || rows == 0 {
            return Err(invalid("subsampling needs at least one draw and one row"));
        }
        if steps < 2 {
            return Ok(Self::full(steps, rows));
        }
        let groups = (0..draws)
            .map(|k| {
                let t = rng.random_range(2..=steps);
                let mut members: Vec<usize> = (k..rows).step_by(draws).collect();
                if members.is_empty() {
                    members.push(k % rows);
                }
                StepGroup { t, rows: members }
            })
            .collect();
        Ok(Self {
            groups,
            kl_scale: (steps - 1) as f64 / draws as f64,
            full: false,
        })
    }

    pub fn is_full(&self) -> bool {
        self.full
    }

    pub fn max_step(&self) -> usize {
        self.groups.iter().map(|g| g.t).max().unwrap_or(1)
    }
}

/// The randomness of one bound evaluation, drawn up front so the bound is a
/// deterministic function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Auxiliary {
    /// Frozen per-step noise for the whole batch.
    Gaussian(FrozenNoise),
    /// One sampled `x^(t)` block per plan group.
    Binomial(Vec<Array2<f64>>),
}

impl Auxiliary {
    pub fn draw<R: Rng + ?Sized>(dm: &DiffusionModel, x0: &Array2<f64>, plan: &BoundPlan, rng: &mut R) -> Self {
        match dm.kind() {
            DiffusionKind::Gaussian => Self::Gaussian(FrozenNoise::draw(dm.steps(), x0.nrows(), dm.dim(), rng)),
            DiffusionKind::Binomial => Self::Binomial(
                plan.groups
                    .iter()
                    .map(|g| {
                        let gamma = dm.spec.schedule.gamma(g.t);
                        x0.select(Axis(0), &g.rows).mapv(|x| {
                            if rng.random::<f64>() < marginal_rate(gamma, x) {
                                1.0
                            } else {
                                0.0
                            }
                        })
                    })
                    .collect(),
            ),
        }
    }
}

/// Schedule quantities as tape nodes: differentiable when the schedule is
/// learnable, constants otherwise.
struct ScheduleVars {
    learnable: Option<(Var, Var, Var)>,
}

impl ScheduleVars {
    fn new(tape: &mut Tape, dm: &DiffusionModel, src: &ParamSource) -> Self {
        let schedule = &dm.spec.schedule;
        if !schedule.is_learnable() {
            return Self { learnable: None };
        }
        let steps = schedule.steps();
        let block = crate::approximators::Block {
            name: "schedule_logits".into(),
            offset: dm.schedule_offset(),
            rows: 1,
            cols: steps - 1,
        };
        let u = src.leaf(tape, &block);
        let beta = tape.sigmoid(u);
        let neg_u = tape.neg(u);
        let log_keep = tape.log_sigmoid(neg_u);
        let first = tape.scalar_const((1.0 - schedule.beta(1)).ln());
        let logs = tape.concat_cols(&[first, log_keep]);
        let log_abar = tape.cumsum_cols(logs);
        let abar = tape.exp(log_abar);
        let em1 = tape.expm1(log_abar);
        let om = tape.neg(em1);
        Self {
            learnable: Some((beta, abar, om)),
        }
    }

    fn beta(&self, tape: &mut Tape, dm: &DiffusionModel, t: usize) -> Var {
        match self.learnable {
            Some((beta, _, _)) if t >= 2 => tape.column(beta, t - 2),
            _ => tape.scalar_const(dm.spec.beta(t)),
        }
    }

    fn alpha_bar(&self, tape: &mut Tape, dm: &DiffusionModel, t: usize) -> Var {
        match self.learnable {
            Some((_, abar, _)) if t >= 1 => tape.column(abar, t - 1),
            _ => tape.scalar_const(dm.spec.schedule.alpha_bar(t)),
        }
    }

    /// `1 - alpha_bar_t`
    fn one_minus_alpha_bar(&self, tape: &mut Tape, dm: &DiffusionModel, t: usize) -> Var {
        match self.learnable {
            Some((_, _, om)) if t >= 1 => tape.column(om, t - 1),
            _ => tape.scalar_const(1.0 - dm.spec.schedule.alpha_bar(t)),
        }
    }
}

/// Nodes of a recorded bound.
#[derive(Debug, Clone)]
pub struct BoundGraph {
    /// Batch-mean `K` in nats (`1×1`).
    pub total: Var,
    /// `H_q(X^(T) | X^(0))` per row (or shared `1×1`).
    pub entropy_final: Var,
    /// `H_q(X^(1) | X^(0))` per row (or shared `1×1`).
    pub entropy_first: Var,
    /// Cross entropy of `q(x^(T) | x^(0))` to `pi` per row; this is the
    /// `H_p(X^(T))` term.
    pub entropy_p_final: Var,
    /// The entropy part of `K` per row (`n×1`).
    pub entropy_rows: Var,
    /// Per-row KL divergences (`n_g×1`) for each plan group.
    pub group_kl: Vec<(usize, Var)>,
}

fn all_rows(rows: &[usize], n: usize) -> bool {
    rows.len() == n && rows.iter().enumerate().all(|(i, &r)| i == r)
}

/// Records `K` for the batch `x0` on `tape`.
pub fn record_bound(
    tape: &mut Tape,
    dm: &DiffusionModel,
    src: &ParamSource,
    x0: &Array2<f64>,
    plan: &BoundPlan,
    aux: &Auxiliary,
) -> Result<BoundGraph> {
    let (n, d) = x0.dim();
    if d != dm.dim() || n == 0 {
        return Err(invalid(format!("batch of shape {n}x{d} for a process of dimension {}", dm.dim())));
    }
    if plan.groups.iter().any(|g| g.t < 2 || g.t > dm.steps() || g.rows.iter().any(|&r| r >= n)) {
        return Err(invalid("bound plan does not fit the batch or process"));
    }
    if dm.kind() == DiffusionKind::Binomial && x0.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(invalid("binomial data must be 0/1"));
    }
    let sched = ScheduleVars::new(tape, dm, src);
    let steps = dm.steps();

    let (queries, x0_groups) = match (dm.kind(), aux) {
        (DiffusionKind::Gaussian, Auxiliary::Gaussian(noise)) => {
            if noise.steps() < plan.max_step() || noise.step(1).dim() != (n, d) {
                return Err(invalid("frozen noise does not match the batch"));
            }
            let mut states = Vec::with_capacity(plan.max_step());
            if sched.learnable.is_some() {
                let mut x = tape.constant(x0.clone());
                for t in 1..=plan.max_step() {
                    let beta = sched.beta(tape, dm, t);
                    let keep = tape.one_minus(beta);
                    let keep = tape.sqrt(keep);
                    let sb = tape.sqrt(beta);
                    let e = tape.constant(noise.step(t).clone());
                    let a = tape.mul(x, keep);
                    let b = tape.mul(e, sb);
                    x = tape.add(a, b);
                    states.push(x);
                }
            } else {
                let mut x = x0.clone();
                for t in 1..=plan.max_step() {
                    let beta = dm.spec.beta(t);
                    x = &x * (1.0 - beta).sqrt() + noise.step(t) * beta.sqrt();
                    states.push(tape.constant(x.clone()));
                }
            }
            let mut queries = Vec::with_capacity(plan.groups.len());
            let mut x0s = Vec::with_capacity(plan.groups.len());
            for g in &plan.groups {
                let full = all_rows(&g.rows, n);
                let x = if full { states[g.t - 1] } else { tape.rows(states[g.t - 1], &g.rows) };
                let beta = sched.beta(tape, dm, g.t);
                queries.push(KernelQuery { t: g.t, x, beta });
                x0s.push(if full { x0.clone() } else { x0.select(Axis(0), &g.rows) });
            }
            (queries, x0s)
        }
        (DiffusionKind::Binomial, Auxiliary::Binomial(samples)) => {
            if samples.len() != plan.groups.len() {
                return Err(invalid("sampled states do not match the plan"));
            }
            let mut queries = Vec::with_capacity(plan.groups.len());
            let mut x0s = Vec::with_capacity(plan.groups.len());
            for (g, xt) in plan.groups.iter().zip(samples) {
                if xt.dim() != (g.rows.len(), d) {
                    return Err(invalid("sampled states do not match the plan"));
                }
                let x = tape.constant(xt.clone());
                let beta = sched.beta(tape, dm, g.t);
                queries.push(KernelQuery { t: g.t, x, beta });
                x0s.push(x0.select(Axis(0), &g.rows));
            }
            (queries, x0s)
        }
        _ => {
            return Err(Error::KindMismatch {
                expected: dm.kind().to_string(),
                found: "auxiliary draws of the other kind".into(),
            })
        }
    };

    let kernels = dm.model.record(tape, src, &queries);
    let mut group_kl = Vec::with_capacity(plan.groups.len());
    let mut kl_sum: Option<Var> = None;
    for (((g, q), kv), x0g) in plan.groups.iter().zip(&queries).zip(&kernels).zip(&x0_groups) {
        let rows = match *kv {
            KernelVars::Gaussian { mean, log_var, .. } => {
                gaussian_kl_rows(tape, &sched, dm, g.t, q.x, x0g, mean, log_var)
            }
            KernelVars::Bernoulli { logit } => {
                let xt = tape.value(q.x).to_owned();
                binomial_kl_rows(tape, dm, g.t, &xt, x0g, logit)
            }
        };
        tape.label(rows, format!("KL term at t = {}", g.t));
        let m = tape.mean(rows);
        kl_sum = Some(match kl_sum {
            Some(s) => tape.add(s, m),
            None => m,
        });
        group_kl.push((g.t, rows));
    }

    let (entropy_final, entropy_first, entropy_p_final) = match dm.kind() {
        DiffusionKind::Gaussian => {
            let half_d = d as f64 / 2.0;
            let om_t = sched.one_minus_alpha_bar(tape, dm, steps);
            let abar_t = sched.alpha_bar(tape, dm, steps);
            let l = tape.ln(om_t);
            let l = tape.scale(l, half_d);
            let h_final = tape.shift(l, half_d * (2.0 * PI * E).ln());
            let h_first = tape.scalar_const(half_d * (2.0 * PI * E * dm.spec.beta(1)).ln());
            let sq = x0.mapv(|v| v * v).sum_axis(Axis(1)).insert_axis(Axis(1));
            let sq = tape.constant(sq);
            let a = tape.mul(sq, abar_t);
            let b = tape.scale(om_t, d as f64);
            let s = tape.add(a, b);
            let s = tape.scale(s, 0.5);
            let ce = tape.shift(s, half_d * (2.0 * PI).ln());
            (h_final, h_first, ce)
        }
        DiffusionKind::Binomial => {
            let row_entropy = |gamma: f64| {
                x0.map_axis(Axis(1), |r| r.iter().map(|&x| binary_entropy(marginal_rate(gamma, x))).sum::<f64>())
                    .insert_axis(Axis(1))
            };
            let h_final = tape.constant(row_entropy(dm.spec.schedule.gamma(steps)));
            let h_first = tape.constant(row_entropy(dm.spec.schedule.gamma(1)));
            let ce = tape.scalar_const(d as f64 * LN_2);
            (h_final, h_first, ce)
        }
    };
    let diff = tape.sub(entropy_final, entropy_first);
    let zeros = tape.constant(Array2::zeros((n, 1)));
    let diff = tape.add(diff, zeros);
    let entropy_rows = tape.sub(diff, entropy_p_final);
    tape.label(entropy_rows, "entropy terms");
    let mut total = tape.mean(entropy_rows);
    if let Some(s) = kl_sum {
        let scaled = tape.scale(s, plan.kl_scale);
        total = tape.sub(total, scaled);
    }
    tape.label(total, "bound K");
    Ok(BoundGraph {
        total,
        entropy_final,
        entropy_first,
        entropy_p_final,
        entropy_rows,
        group_kl,
    })
}

#[allow(clippy::too_many_arguments)]
fn gaussian_kl_rows(
    tape: &mut Tape,
    sched: &ScheduleVars,
    dm: &DiffusionModel,
    t: usize,
    xt: Var,
    x0: &Array2<f64>,
    mean: Var,
    log_var: Var,
) -> Var {
    let beta = sched.beta(tape, dm, t);
    let om_prev = sched.one_minus_alpha_bar(tape, dm, t - 1);
    let om = sched.one_minus_alpha_bar(tape, dm, t);
    let abar_prev = sched.alpha_bar(tape, dm, t - 1);
    let keep = tape.one_minus(beta);
    let keep = tape.sqrt(keep);
    let ratio = tape.div(om_prev, om);
    let a = tape.mul(keep, ratio);
    let root = tape.sqrt(abar_prev);
    let rb = tape.mul(root, beta);
    let b = tape.div(rb, om);
    let v = tape.mul(beta, ratio);
    let x0v = tape.constant(x0.clone());
    let ax = tape.mul(xt, a);
    let bx = tape.mul(x0v, b);
    let mu_q = tape.add(ax, bx);

    let neg_lv = tape.neg(log_var);
    let inv = tape.exp(neg_lv);
    let t1 = tape.mul(v, inv);
    let diff = tape.sub(mean, mu_q);
    let sq = tape.square(diff);
    let t2 = tape.mul(sq, inv);
    let lnv = tape.ln(v);
    let inner = tape.add(t1, t2);
    let inner = tape.add(inner, log_var);
    let inner = tape.sub(inner, lnv);
    let inner = tape.shift(inner, -1.0);
    let rows = tape.sum_cols(inner);
    tape.scale(rows, 0.5)
}

fn binomial_kl_rows(tape: &mut Tape, dm: &DiffusionModel, t: usize, xt: &Array2<f64>, x0: &Array2<f64>, logit: Var) -> Var {
    let gamma = dm.spec.schedule.gamma(t - 1);
    let beta = dm.spec.beta(t);
    let mut rq = x0.clone();
    ndarray::Zip::from(&mut rq)
        .and(xt)
        .for_each(|r, &x| *r = binomial_posterior_rate(marginal_rate(gamma, *r), x, beta));
    let neg_entropy = rq.mapv(|r| -binary_entropy(r));
    let rq_c = tape.constant(rq.clone());
    let rq_o = tape.constant(rq.mapv(|r| 1.0 - r));
    let ne = tape.constant(neg_entropy);
    let ls = tape.log_sigmoid(logit);
    let nz = tape.neg(logit);
    let lsn = tape.log_sigmoid(nz);
    let a = tape.mul(rq_c, ls);
    let b = tape.mul(rq_o, lsn);
    let cross = tape.add(a, b);
    let inner = tape.sub(ne, cross);
    tape.sum_cols(inner)
}

/// Per-term decomposition of `K`:
/// `total = -kl_scale * sum(kl_terms) + H_q(X^T|X^0) - H_q(X^1|X^0) - H_p(X^T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundBreakdown {
    /// `(t, batch-mean KL)` in nats, one entry per evaluated step.
    pub kl_terms: Vec<(usize, f64)>,
    pub kl_scale: f64,
    pub entropy_q_final: f64,
    pub entropy_q_first: f64,
    pub entropy_p_final: f64,
    pub total_nats: f64,
    /// Monte Carlo standard error of `total_nats`.
    pub stderr_nats: f64,
    pub samples: usize,
}

impl BoundBreakdown {
    pub fn total_bits(&self) -> f64 {
        self.total_nats / LN_2
    }

    pub fn stderr_bits(&self) -> f64 {
        self.stderr_nats / LN_2
    }

    pub fn kl_sum(&self) -> f64 {
        self.kl_scale * self.kl_terms.iter().map(|(_, k)| k).sum::<f64>()
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Evaluates the bound (without gradients) on the batch `x0`.
pub fn bound_terms(dm: &DiffusionModel, x0: &Array2<f64>, plan: &BoundPlan, aux: &Auxiliary) -> Result<BoundBreakdown> {
    let theta = dm.parameters();
    let mut tape = Tape::new();
    let graph = record_bound(&mut tape, dm, &ParamSource::frozen(&theta), x0, plan, aux)?;
    let n = x0.nrows();
    let column = |v: Var| -> Vec<f64> {
        let val = tape.value(v);
        if val.len() == 1 {
            vec![val[[0, 0]]; n]
        } else {
            val.iter().copied().collect()
        }
    };
    let mut kl_rows = Vec::with_capacity(graph.group_kl.len());
    let mut kl_terms = Vec::with_capacity(graph.group_kl.len());
    for &(t, v) in &graph.group_kl {
        let rows: Vec<f64> = tape.value(v).iter().copied().collect();
        let (m, _) = mean_sd(&rows);
        if !m.is_finite() {
            return Err(Error::NonFiniteTerm { t });
        }
        kl_terms.push((t, m));
        kl_rows.push(rows);
    }
    let entropy_rows = column(graph.entropy_rows);
    if entropy_rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteTerm { t: dm.steps() });
    }
    let total_nats = tape.scalar(graph.total);
    let stderr_nats = if plan.is_full() {
        let per_row: Vec<f64> = (0..n)
            .map(|i| entropy_rows[i] - kl_rows.iter().map(|r| r[i]).sum::<f64>())
            .collect();
        mean_sd(&per_row).1 / (n as f64).sqrt()
    } else {
        let (_, sd_e) = mean_sd(&entropy_rows);
        let means: Vec<f64> = kl_terms.iter().map(|(_, k)| *k).collect();
        let (_, sd_k) = mean_sd(&means);
        let g = means.len().max(1) as f64;
        let kl_se = plan.kl_scale * g * sd_k / g.sqrt();
        ((sd_e * sd_e) / n as f64 + kl_se * kl_se).sqrt()
    };
    let mean_of = |v: Var| mean_sd(&column(v)).0;
    Ok(BoundBreakdown {
        kl_terms,
        kl_scale: plan.kl_scale,
        entropy_q_final: mean_of(graph.entropy_final),
        entropy_q_first: mean_of(graph.entropy_first),
        entropy_p_final: mean_of(graph.entropy_p_final),
        total_nats,
        stderr_nats,
        samples: n,
    })
}

/// Upper limit on `rows × steps` recorded on one tape by [`estimate_bound`].
pub const BOUND_CHUNK_CELLS: usize = 50_000;

/// Full-sum bound on `x0` with freshly drawn auxiliary randomness. Large
/// batches are evaluated in row chunks and combined.
pub fn estimate_bound<R: Rng + ?Sized>(dm: &DiffusionModel, x0: &Array2<f64>, rng: &mut R) -> Result<BoundBreakdown> {
    let chunk = (BOUND_CHUNK_CELLS / dm.steps()).max(1);
    let n = x0.nrows();
    if n <= chunk {
        let plan = BoundPlan::full(dm.steps(), n);
        let aux = Auxiliary::draw(dm, x0, &plan, rng);
        return bound_terms(dm, x0, &plan, &aux);
    }
    let mut parts = Vec::new();
    for start in (0..n).step_by(chunk) {
        let rows = x0.slice(ndarray::s![start..(start + chunk).min(n), ..]).to_owned();
        let plan = BoundPlan::full(dm.steps(), rows.nrows());
        let aux = Auxiliary::draw(dm, &rows, &plan, rng);
        parts.push(bound_terms(dm, &rows, &plan, &aux)?);
    }
    Ok(combine(&parts))
}

/// Sample-weighted combination of breakdowns over disjoint batches.
fn combine(parts: &[BoundBreakdown]) -> BoundBreakdown {
    let n: usize = parts.iter().map(|p| p.samples).sum();
    let w = |p: &BoundBreakdown| p.samples as f64 / n as f64;
    let avg = |f: &dyn Fn(&BoundBreakdown) -> f64| parts.iter().map(|p| w(p) * f(p)).sum::<f64>();
    let kl_terms = parts[0]
        .kl_terms
        .iter()
        .enumerate()
        .map(|(i, &(t, _))| (t, parts.iter().map(|p| w(p) * p.kl_terms[i].1).sum()))
        .collect();
    BoundBreakdown {
        kl_terms,
        kl_scale: parts[0].kl_scale,
        entropy_q_final: avg(&|p| p.entropy_q_final),
        entropy_q_first: avg(&|p| p.entropy_q_first),
        entropy_p_final: avg(&|p| p.entropy_p_final),
        total_nats: avg(&|p| p.total_nats),
        stderr_nats: parts.iter().map(|p| (w(p) * p.stderr_nats).powi(2)).sum::<f64>().sqrt(),
        samples: n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximators::{finite_difference_check, ModelConfig, ModelRegistry, ReadoutMode};
    use crate::kernels::{make_schedule, DiffusionSpec, ScheduleMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn build(name: &str, kind: DiffusionKind, dim: usize, steps: usize, mode: ScheduleMode, seed: u64) -> DiffusionModel {
        let spec = DiffusionSpec::new(make_schedule(kind, steps, 0.05, mode).unwrap(), dim).unwrap();
        let cfg = ModelConfig {
            kind,
            dim,
            steps,
            hidden: vec![5, 4],
            readout: ReadoutMode::PerStep,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = ModelRegistry::with_defaults().build(name, &cfg, None, &mut rng).unwrap();
        for v in model.parameters_mut().values_mut() {
            *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
        DiffusionModel::new(spec, model).unwrap()
    }

    fn gaussian_batch(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal))
    }

    fn grad_error(dm: &DiffusionModel, x0: &Array2<f64>, seed: u64) -> f64 {
        let plan = BoundPlan::full(dm.steps(), x0.nrows());
        let aux = Auxiliary::draw(dm, x0, &plan, &mut ChaCha8Rng::seed_from_u64(seed));
        finite_difference_check(
            &dm.parameters(),
            |tape, src| Ok(record_bound(tape, dm, src, x0, &plan, &aux)?.total),
            1e-5,
        )
        .unwrap()
    }

    #[test]
    fn gaussian_bound_gradient_including_schedule() {
        let dm = build("rbf", DiffusionKind::Gaussian, 2, 5, ScheduleMode::Learnable, 1);
        assert_eq!(dm.n_params(), dm.model.n_params() + 4);
        let err = grad_error(&dm, &gaussian_batch(6, 2, 2), 3);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn binomial_bound_gradient() {
        let dm = build("mlp", DiffusionKind::Binomial, 4, 8, ScheduleMode::Fixed, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = Array2::from_shape_simple_fn((5, 4), || if rng.random::<bool>() { 1.0 } else { 0.0 });
        let err = grad_error(&dm, &x0, 6);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn breakdown_adds_up_and_kl_terms_are_nonnegative() {
        for (name, kind) in [("rbf", DiffusionKind::Gaussian), ("mlp", DiffusionKind::Binomial)] {
            let dm = build(name, kind, 3, 6, ScheduleMode::Fixed, 7);
            let x0 = if kind == DiffusionKind::Gaussian {
                gaussian_batch(20, 3, 8)
            } else {
                gaussian_batch(20, 3, 8).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })
            };
            let b = estimate_bound(&dm, &x0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            assert_eq!(b.kl_terms.len(), 5);
            assert!(b.kl_terms.iter().all(|(_, k)| *k >= 0.0));
            let rebuilt = -b.kl_sum() + b.entropy_q_final - b.entropy_q_first - b.entropy_p_final;
            assert!((rebuilt - b.total_nats).abs() < 1e-10);
            assert!(b.stderr_nats > 0.0);
        }
    }

    #[test]
    fn analytic_reverse_on_equilibrium_data_is_tight_in_expectation() {
        let dm = build("analytic", DiffusionKind::Gaussian, 1, 10, ScheduleMode::Fixed, 0);
        let x0 = gaussian_batch(20_000, 1, 11);
        let b = estimate_bound(&dm, &x0, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        let truth = -0.5 * (2.0 * PI * E).ln();
        assert!((b.total_nats - truth).abs() < 4.0 * b.stderr_nats, "{} vs {truth}", b.total_nats);
        // The KL terms conditioned on x0 do not vanish; they telescope to
        // H_q(X^T|X^0) - H_q(X^1|X^0) = 0.5 ln(1 / beta_1) under the fixed rule.
        let expected = 0.5 * (1.0 / dm.spec.beta(1)).ln();
        assert!((b.kl_sum() - expected).abs() < 0.02, "{} vs {expected}", b.kl_sum());
    }

    #[test]
    fn subsampled_bound_is_unbiased() {
        let dm = build("rbf", DiffusionKind::Gaussian, 2, 10, ScheduleMode::Fixed, 13);
        let x0 = gaussian_batch(4, 2, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let reps = 10_000;
        let (mut full, mut sub) = (Vec::with_capacity(reps), Vec::with_capacity(reps));
        for _ in 0..reps {
            full.push(estimate_bound(&dm, &x0, &mut rng).unwrap().total_nats);
            let plan = BoundPlan::subsampled(10, 4, 2, &mut rng).unwrap();
            let aux = Auxiliary::draw(&dm, &x0, &plan, &mut rng);
            sub.push(bound_terms(&dm, &x0, &plan, &aux).unwrap().total_nats);
        }
        let (mf, sf) = mean_sd(&full);
        let (ms, ss) = mean_sd(&sub);
        let se = ((sf * sf + ss * ss) / reps as f64).sqrt();
        assert!((mf - ms).abs() < 4.0 * se, "{mf} vs {ms} (se {se})");
    }

    #[test]
    fn plans_cover_expected_steps() {
        let full = BoundPlan::full(5, 3);
        assert_eq!(full.groups.iter().map(|g| g.t).collect::<Vec<_>>(), vec![2, 3, 4, 5]);
        let sub = BoundPlan::subsampled(2000, 10, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(sub.kl_scale, 1999.0 / 4.0);
        let mut rows: Vec<usize> = sub.groups.iter().flat_map(|g| g.rows.clone()).collect();
        rows.sort();
        assert_eq!(rows, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn mismatched_auxiliary_is_rejected() {
        let dm = build("analytic", DiffusionKind::Gaussian, 1, 3, ScheduleMode::Fixed, 0);
        let x0 = gaussian_batch(2, 1, 0);
        let plan = BoundPlan::full(3, 2);
        assert!(bound_terms(&dm, &x0, &plan, &Auxiliary::Binomial(vec![])).is_err());
    }
}
