//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Criteria 1 and 2 train the shipped configurations in `configs/` and take
//! most of the runtime. Set `DPM_ACCEPTANCE_SKIP_TRAINING=1` to report them as
//! skipped (this also skips the toy-run half of criterion 6).

use std::f64::consts::{E, PI};
use std::path::{Path, PathBuf};
use std::time::Instant;

use dpm::approximators::{finite_difference_check, ModelConfig, ModelRegistry, ReadoutMode};
use dpm::cli::checkpoint::Checkpoint;
use dpm::cli::{mean_activity_null, read_dataset, train_command};
use dpm::conditioning::{perturbed_binomial_kernel, perturbed_gaussian_kernel, sample_conditional, ExternalFactor, RSchedule};
use dpm::datasets::{is_heartbeat, swiss_roll};
use dpm::inference::{
    energy_distance, energy_null_quantile, entropy_bound_table, entropy_bounds, estimate_log_likelihood,
    exact_binomial_log_likelihood, reverse_kernel_entropy, sample_reverse,
};
use dpm::kernels::{make_schedule, DiagonalDistribution, DiffusionKind, DiffusionSpec, ScheduleMode};
use dpm::objective::{estimate_bound, fixed_spec, null_baseline, record_bound, Auxiliary, BoundPlan, DiffusionModel};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Gate {
    failed: Vec<String>,
}

impl Gate {
    fn report(&mut self, id: &str, pass: bool, detail: String) {
        println!("criterion {id}: {} {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id.to_string());
        }
    }

    fn skip(&mut self, id: &str, why: &str) {
        println!("criterion {id}: SKIP {why}");
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Copies a shipped config into `dir`, redirecting its output directory.
fn staged_config(name: &str, dir: &Path) -> PathBuf {
    let text = std::fs::read_to_string(repo_root().join("configs").join(name)).expect("shipped config");
    let mut body: String = text
        .lines()
        .filter(|l| !l.trim_start().starts_with("out_dir"))
        .map(|l| format!("{l}\n"))
        .collect();
    body.push_str("out_dir = run\n");
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn normal_batch(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal))
}

fn perturbed(name: &str, spec: DiffusionSpec, hidden: Vec<usize>, seed: u64, scale: f64) -> DiffusionModel {
    let cfg = ModelConfig {
        kind: spec.kind(),
        dim: spec.dim,
        steps: spec.steps(),
        hidden,
        readout: ReadoutMode::PerStep,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ModelRegistry::with_defaults().build(name, &cfg, None, &mut rng).unwrap();
    for v in model.parameters_mut().values_mut() {
        *v += scale * rng.sample::<f64, _>(StandardNormal);
    }
    DiffusionModel::new(spec, model).unwrap()
}

struct ToyRun {
    model: DiffusionModel,
    holdout: Array2<f64>,
}

fn heartbeat_criterion(gate: &mut Gate) -> ToyRun {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = staged_config("heartbeat.cfg", tmp.path());
    let start = Instant::now();
    let ck = train_command(&cfg).expect("heartbeat training");
    let seconds = start.elapsed().as_secs_f64();
    let holdout = read_dataset(&tmp.path().join("run/holdout.txt")).unwrap().data;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let bound = estimate_bound(&ck.model, &holdout, &mut rng).unwrap();
    let k = bound.total_bits();
    let samples = sample_reverse(&ck.model, 500, &mut rng, false).unwrap().samples;
    let exact = samples.rows().into_iter().filter(|r| is_heartbeat(&r.to_vec())).count();
    let null = null_baseline(&ck.model.spec, &holdout).unwrap();
    let mean_null = mean_activity_null(&holdout);
    gate.report(
        "1",
        k >= -2.6 && exact >= 475 && seconds <= 1800.0,
        format!(
            "heartbeat holdout K = {k:.3} +- {:.3} bits (need >= -2.6), exact samples {exact}/500 (need >= 475), \
             train {seconds:.0} s (budget 1800 s); K - null = {:.3} (null {null:.1}), K - mean-activity null = {:.3}",
            bound.stderr_bits(),
            k - null,
            k - mean_null
        ),
    );
    ToyRun { model: ck.model, holdout }
}

fn swiss_criterion(gate: &mut Gate) -> ToyRun {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = staged_config("swiss_roll.cfg", tmp.path());
    let start = Instant::now();
    let ck = train_command(&cfg).expect("swiss-roll training");
    let seconds = start.elapsed().as_secs_f64();
    let holdout = read_dataset(&tmp.path().join("run/holdout.txt")).unwrap().data;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let bound = estimate_bound(&ck.model, &holdout, &mut rng).unwrap();
    let k = bound.total_bits();
    let null = null_baseline(&ck.model.spec, &holdout).unwrap();
    let samples = sample_reverse(&ck.model, 2000, &mut rng, false).unwrap().samples;
    let energy = energy_distance(&samples, &holdout).unwrap();
    let pool = swiss_roll(4000, 99).unwrap().data;
    let q95 = energy_null_quantile(&pool, 2000, 100, 0.95, &mut rng).unwrap();
    let gap_ok = (k - null - 6.45).abs() <= 2.0;
    gate.report(
        "2",
        k >= 1.6 && gap_ok && energy < q95 && seconds <= 1200.0,
        format!(
            "swiss roll holdout K = {k:.3} +- {:.3} bits (need >= 1.6), K - null = {:.3} (need 6.45 +- 2), \
             energy distance {energy:.5} vs null q95 {q95:.5}, train {seconds:.0} s (budget 1200 s)",
            bound.stderr_bits(),
            k - null
        ),
    );
    ToyRun { model: ck.model, holdout }
}

fn quasi_static(gate: &mut Gate) {
    let d = 2;
    let dm = DiffusionModel::analytic(fixed_spec(DiffusionKind::Gaussian, 40, d).unwrap()).unwrap();
    let x0 = normal_batch(10_000, d, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let bound = estimate_bound(&dm, &x0, &mut rng).unwrap();
    let max_kl = bound.kl_terms.iter().map(|(_, k)| *k).fold(0.0, f64::max);
    gate.report(
        "3a",
        max_kl < 1e-10,
        format!("largest KL term {max_kl:.3e} nats (need < 1e-10)"),
    );
    let spread = (0..20)
        .map(|i| {
            let x = [x0[[i, 0]], x0[[i, 1]]];
            estimate_log_likelihood(&dm, &x, 50, &mut rng).unwrap().relative_spread()
        })
        .fold(0.0, f64::max);
    gate.report("3b", spread < 1e-8, format!("largest relative weight spread {spread:.3e} (need < 1e-8)"));
    let truth = -(d as f64) / 2.0 * (2.0 * PI * E).log2();
    let k = bound.total_bits();
    let se = bound.stderr_bits();
    gate.report(
        "3c",
        (k - truth).abs() <= 4.0 * se,
        format!("K = {k:.4} bits vs {truth:.4} (4 stderr = {:.4})", 4.0 * se),
    );
}

fn small_instance(gate: &mut Gate) {
    let dm = perturbed("mlp", fixed_spec(DiffusionKind::Binomial, 3, 1).unwrap(), vec![6, 5], 7, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut pass = true;
    let mut parts = Vec::new();
    for x in [0.0, 1.0] {
        let exact = exact_binomial_log_likelihood(&dm, &[x]).unwrap();
        let est = estimate_log_likelihood(&dm, &[x], 20_000, &mut rng).unwrap();
        let k = estimate_bound(&dm, &Array2::from_elem((20_000, 1), x), &mut rng).unwrap();
        pass &= (est.log_p - exact).abs() <= 4.0 * est.stderr + 1e-12;
        pass &= k.total_nats <= exact + 4.0 * k.stderr_nats;
        parts.push(format!(
            "x0={x}: exact {exact:.5}, estimate {:.5} +- {:.5}, K {:.5} nats",
            est.log_p, est.stderr, k.total_nats
        ));
    }
    gate.report("4", pass, parts.join("; "));
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

fn gradients(gate: &mut Gate) {
    let gspec = DiffusionSpec::new(make_schedule(DiffusionKind::Gaussian, 5, 0.05, ScheduleMode::Learnable).unwrap(), 2).unwrap();
    let gauss = perturbed("rbf", gspec.clone(), vec![5], 1, 0.3);
    let e_gauss = grad_error(&gauss, &normal_batch(6, 2, 2), 3);
    let bin = perturbed("mlp", fixed_spec(DiffusionKind::Binomial, 8, 4).unwrap(), vec![5, 4], 4, 0.3);
    let bits = normal_batch(5, 4, 5).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let e_bin = grad_error(&bin, &bits, 6);
    let schedule_only = DiffusionModel::analytic(gspec).unwrap();
    let e_beta = grad_error(&schedule_only, &normal_batch(6, 2, 7), 8);
    let worst = e_gauss.max(e_bin).max(e_beta);
    gate.report(
        "5",
        worst < 1e-4,
        format!("relative errors: gaussian {e_gauss:.2e}, binomial {e_bin:.2e}, dK/dbeta {e_beta:.2e} (need < 1e-4)"),
    );
}

fn entropy(gate: &mut Gate, runs: &[&ToyRun]) {
    let mut pass = true;
    let mut checked = 0;
    for run in runs {
        for r in entropy_bound_table(&run.model.spec, &run.holdout).unwrap() {
            pass &= r.lower <= r.upper;
            checked += 1;
        }
    }
    let spec = fixed_spec(DiffusionKind::Gaussian, 40, 2).unwrap();
    let dm = DiffusionModel::analytic(spec.clone()).unwrap();
    let data = normal_batch(2000, 2, 9);
    let mut worst: f64 = 0.0;
    for t in 2..=40 {
        let upper = entropy_bounds(&spec, t, &data).unwrap().upper;
        worst = worst.max((reverse_kernel_entropy(&dm, &data, t).unwrap() - upper).abs());
    }
    gate.report(
        "6",
        pass && worst < 1e-9,
        format!("lower <= upper at {checked} toy-run steps: {pass}; analytic entropy vs upper max gap {worst:.2e}"),
    );
}

/// Mean of `N(mu, var) N(a; x, sigma_r2)` normalized on a fine grid.
fn grid_product_mean(mu: f64, var: f64, a: f64, sigma_r2: f64) -> f64 {
    let h = 1e-4;
    let (mut z, mut m1) = (0.0, 0.0);
    let mut x = mu - 12.0 * var.sqrt();
    while x <= mu + 12.0 * var.sqrt() {
        let w = (-(x - mu).powi(2) / (2.0 * var) - (a - x).powi(2) / (2.0 * sigma_r2)).exp();
        z += w;
        m1 += w * x;
        x += h;
    }
    m1 / z
}

fn conditioning(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gauss = perturbed("rbf", fixed_spec(DiffusionKind::Gaussian, 8, 3).unwrap(), vec![6], 5, 0.3);
    let mask = ExternalFactor::mask(vec![true, false, true], vec![0.123456789, 0.0, -2.5]).unwrap();
    let g = sample_conditional(&gauss, &mask, RSchedule::Constant, 200, &mut rng).unwrap().samples;
    let bin = perturbed("mlp", fixed_spec(DiffusionKind::Binomial, 10, 5).unwrap(), vec![6, 5], 6, 0.3);
    let bmask = ExternalFactor::mask(vec![true, true, false, false, true], vec![1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let b = sample_conditional(&bin, &bmask, RSchedule::Constant, 200, &mut rng).unwrap().samples;
    let inpaint = g.rows().into_iter().all(|r| r[0] == 0.123456789 && r[2] == -2.5)
        && b.rows().into_iter().all(|r| r[0] == 1.0 && r[1] == 0.0 && r[4] == 1.0);
    gate.report("7a", inpaint, format!("known coordinates reproduced exactly: {inpaint}"));

    let analytic = DiffusionModel::analytic(fixed_spec(DiffusionKind::Gaussian, 40, 1).unwrap()).unwrap();
    let (y, noise) = (1.5, 0.5);
    let n = 10_000;
    let f = ExternalFactor::gaussian(vec![y], noise).unwrap();
    let s = sample_conditional(&analytic, &f, RSchedule::Constant, n, &mut rng).unwrap().samples;
    let (post_mean, post_var) = (y / (1.0 + noise), noise / (1.0 + noise));
    let mean = s.mean().unwrap();
    let var = s.mapv(|v| (v - mean).powi(2)).sum() / (n - 1) as f64;
    let se_mean = (post_var / n as f64).sqrt();
    let se_var = post_var * (2.0 / (n - 1) as f64).sqrt();
    gate.report(
        "7b",
        (mean - post_mean).abs() <= 4.0 * se_mean && (var - post_var).abs() <= 4.0 * se_var,
        format!(
            "denoised mean {mean:.4} vs {post_mean:.4} (4 se {:.4}), variance {var:.4} vs {post_var:.4} (4 se {:.4})",
            4.0 * se_mean,
            4.0 * se_var
        ),
    );

    let (mu, kv, a) = (0.4, 0.01, 1.1);
    let mut errors = Vec::new();
    for sigma_r2 in [0.1, 0.2, 0.4] {
        let k = DiagonalDistribution::gaussian(vec![mu], vec![kv]).unwrap();
        let DiagonalDistribution::Gaussian { mean, .. } = perturbed_gaussian_kernel(&k, &[(a - mu) / sigma_r2]).unwrap() else {
            unreachable!()
        };
        errors.push((kv / sigma_r2, (mean[0] - grid_product_mean(mu, kv, a, sigma_r2)).abs()));
    }
    let slopes: Vec<f64> = errors
        .windows(2)
        .map(|w| (w[0].1 / w[1].1).ln() / (w[0].0 / w[1].0).ln())
        .collect();
    let bounded = errors.iter().all(|&(eps, err)| err <= 1.2 * (a - mu) * eps * eps);
    gate.report(
        "7c",
        bounded && slopes.iter().all(|s| (s - 2.0).abs() < 0.1),
        format!("mean errors [{}], log-log slopes {slopes:.3?} (need 2)", errors.iter().map(|e| format!("{:.3e}", e.1)).collect::<Vec<_>>().join(", ")),
    );

    let mut worst: f64 = 0.0;
    for c in [0.05, 0.3, 0.5, 0.8, 0.99] {
        for d in [0.01, 0.2, 0.5, 0.9] {
            let r = perturbed_binomial_kernel(&[c], &[d]).unwrap()[0];
            let (one, zero) = (c * d, (1.0 - c) * (1.0 - d));
            worst = worst.max((r - one / (one + zero)).abs());
        }
    }
    gate.report("7d", worst < 1e-12, format!("largest deviation from two-outcome normalization {worst:.2e}"));
}

fn infrastructure(gate: &mut Gate) {
    let tmp = tempfile::tempdir().unwrap();
    let config = "
        dataset = swiss-roll
        n = 300
        holdout = 50
        steps = 10
        schedule = learnable
        model = rbf
        hidden = 8
        train_steps = 60
        log_every = 20
        out_dir = run
    ";
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("run.cfg"), config).unwrap();
        let ck = train_command(&dir.join("run.cfg")).unwrap();
        let samples = sample_reverse(&ck.model, 100, &mut ChaCha8Rng::seed_from_u64(5), false).unwrap().samples;
        outputs.push((std::fs::read(dir.join("run/final.ckpt")).unwrap(), samples));
    }
    let deterministic = outputs[0] == outputs[1];
    let path = tmp.path().join("a/run/final.ckpt");
    let ck = Checkpoint::load(&path, &ModelRegistry::with_defaults()).unwrap();
    ck.save(&tmp.path().join("copy.ckpt")).unwrap();
    let round_trip = std::fs::read(tmp.path().join("copy.ckpt")).unwrap() == outputs[0].0;
    let readme = std::fs::read_to_string(repo_root().join("README.md")).unwrap_or_default();
    let docs = ["CIFAR", "bark", "dead-leaves", "NOT reproduced"].iter().all(|w| readme.contains(w));
    gate.report(
        "8",
        deterministic && round_trip && docs,
        format!("checkpoint round trip bitwise: {round_trip}; pipeline deterministic: {deterministic}; README marks CIFAR/bark/dead-leaves as not reproduced: {docs}"),
    );
}

fn main() {
    let mut gate = Gate { failed: Vec::new() };
    let skip_training = std::env::var("DPM_ACCEPTANCE_SKIP_TRAINING").is_ok_and(|v| v == "1");
    let runs = if skip_training {
        gate.skip("1", "training disabled by DPM_ACCEPTANCE_SKIP_TRAINING");
        gate.skip("2", "training disabled by DPM_ACCEPTANCE_SKIP_TRAINING");
        Vec::new()
    } else {
        vec![heartbeat_criterion(&mut gate), swiss_criterion(&mut gate)]
    };
    quasi_static(&mut gate);
    small_instance(&mut gate);
    gradients(&mut gate);
    entropy(&mut gate, &runs.iter().collect::<Vec<_>>());
    conditioning(&mut gate);
    infrastructure(&mut gate);
    if gate.failed.is_empty() {
        println!("acceptance: all criteria PASS");
    } else {
        println!("acceptance: FAIL ({})", gate.failed.join(", "));
        std::process::exit(1);
    }
}
