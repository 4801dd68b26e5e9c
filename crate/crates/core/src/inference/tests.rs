use super::*;
use crate::approximators::{ModelConfig, ModelRegistry, ReadoutMode};
use crate::kernels::{make_schedule, ScheduleMode};
use crate::objective::{bound_terms, estimate_bound, fixed_spec, Auxiliary, BoundPlan};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn trained_like(name: &str, kind: DiffusionKind, dim: usize, steps: usize, seed: u64) -> DiffusionModel {
    let spec = DiffusionSpec::new(make_schedule(kind, steps, 0.05, ScheduleMode::Fixed).unwrap(), dim).unwrap();
    let cfg = ModelConfig {
        kind,
        dim,
        steps,
        hidden: vec![6, 5],
        readout: ReadoutMode::PerStep,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ModelRegistry::with_defaults().build(name, &cfg, None, &mut rng).unwrap();
    for v in model.parameters_mut().values_mut() {
        *v += 0.5 * rng.sample::<f64, _>(StandardNormal);
    }
    DiffusionModel::new(spec, model).unwrap()
}

fn normal_batch(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal))
}

#[test]
fn analytic_samples_are_standard_normal() {
    let dm = DiffusionModel::analytic(fixed_spec(DiffusionKind::Gaussian, 20, 2).unwrap()).unwrap();
    let n = 4000;
    let rec = sample_reverse(&dm, n, &mut ChaCha8Rng::seed_from_u64(3), false).unwrap();
    let x = &rec.samples;
    let se = 1.0 / (n as f64).sqrt();
    for j in 0..2 {
        let col = x.column(j);
        assert!(col.mean().unwrap().abs() < 4.0 * se);
        let var = col.mapv(|v| v * v).mean().unwrap();
        assert!((var - 1.0).abs() < 4.0 * se * 2f64.sqrt());
    }
    let cov = (&x.column(0) * &x.column(1)).mean().unwrap();
    assert!(cov.abs() < 4.0 * se);
}

#[test]
fn frames_run_from_equilibrium_to_samples() {
    let dm = trained_like("rbf", DiffusionKind::Gaussian, 2, 6, 1);
    let rec = sample_reverse(&dm, 5, &mut ChaCha8Rng::seed_from_u64(0), true).unwrap();
    assert_eq!(rec.frames.len(), 7);
    assert_eq!(rec.frame(0).unwrap(), &rec.samples);
    assert_eq!(rec.frame(6).unwrap(), &rec.frames[0]);
    assert!(rec.log_reverse.iter().all(|v| v.is_finite()));
    let again = sample_reverse(&dm, 5, &mut ChaCha8Rng::seed_from_u64(0), true).unwrap();
    assert_eq!(rec, again);
}

#[test]
fn quasi_static_weights_are_identical() {
    let dm = DiffusionModel::analytic(fixed_spec(DiffusionKind::Gaussian, 50, 1).unwrap()).unwrap();
    let est = estimate_log_likelihood(&dm, &[0.3], 200, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(est.relative_spread() < 1e-8, "{}", est.relative_spread());
    let exact = -0.5 * (2.0 * PI).ln() - 0.045;
    assert!((est.log_p - exact).abs() < 1e-9);
}

#[test]
fn tiny_binomial_matches_enumeration() {
    let dm = trained_like("mlp", DiffusionKind::Binomial, 1, 3, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for x in [0.0, 1.0] {
        let exact = exact_binomial_log_likelihood(&dm, &[x]).unwrap();
        let est = estimate_log_likelihood(&dm, &[x], 20_000, &mut rng).unwrap();
        assert!((est.log_p - exact).abs() < 4.0 * est.stderr + 1e-12, "{} vs {exact}", est.log_p);
        let k = estimate_bound(&dm, &Array2::from_elem((20_000, 1), x), &mut rng).unwrap();
        assert!(k.total_nats <= exact + 4.0 * k.stderr_nats);
    }
    let p0 = exact_binomial_log_likelihood(&dm, &[0.0]).unwrap().exp();
    let p1 = exact_binomial_log_likelihood(&dm, &[1.0]).unwrap().exp();
    assert!((p0 + p1 - 1.0).abs() < 1e-12);
}

#[test]
fn importance_estimate_exceeds_bound() {
    let dm = trained_like("rbf", DiffusionKind::Gaussian, 2, 5, 4);
    let data = normal_batch(100, 2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ll = estimate_dataset_log_likelihood(&dm, &data, 200, &mut rng).unwrap();
    let k = bound_terms(&dm, &data, &BoundPlan::full(5, 100), &{
        let plan = BoundPlan::full(5, 100);
        Auxiliary::draw(&dm, &data, &plan, &mut rng)
    })
    .unwrap();
    assert!(ll.mean + 4.0 * (ll.stderr + k.stderr_nats) > k.total_nats, "{} < {}", ll.mean, k.total_nats);
}

#[test]
fn estimator_variance_shrinks_with_trajectories() {
    let dm = trained_like("mlp", DiffusionKind::Binomial, 2, 4, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let variance = |n: usize, rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..50)
            .map(|_| estimate_log_likelihood(&dm, &[1.0, 0.0], n, rng).unwrap().log_p)
            .collect();
        let m = v.iter().sum::<f64>() / 50.0;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 49.0
    };
    let ratio = variance(20, &mut rng) / variance(320, &mut rng);
    assert!((6.4..40.0).contains(&ratio), "{ratio}");
}

#[test]
fn zero_weights_are_reported() {
    assert!(matches!(log_mean_exp(&[f64::NEG_INFINITY; 3]), Err(Error::ZeroDensity)));
    let (m, se) = log_mean_exp(&[0.0, 0.0]).unwrap();
    assert_eq!((m, se), (0.0, 0.0));
    let (m, _) = log_mean_exp(&[-1000.0, -1000.0 + 2f64.ln()]).unwrap();
    assert!((m - (-1000.0 + 1.5f64.ln())).abs() < 1e-12);
}

#[test]
fn gaussian_bound_gap_matches_closed_form() {
    let spec = DiffusionSpec::new(
        make_schedule(DiffusionKind::Gaussian, 10, 1e-3, ScheduleMode::Learnable).unwrap(),
        3,
    )
    .unwrap();
    let data = normal_batch(5000, 3, 1);
    for r in entropy_bound_table(&spec, &data).unwrap() {
        assert!(r.lower <= r.upper);
        let gap = 1.5 * ((1.0 - spec.schedule.alpha_bar(r.t - 1)) / (1.0 - spec.schedule.alpha_bar(r.t))).ln();
        assert!((r.lower - r.upper - gap).abs() < 1e-12);
    }
    assert!(entropy_bounds(&spec, 3, &(&data * 2.0)).is_err());
    assert!(entropy_bounds(&spec, 1, &data).is_err());
}

#[test]
fn analytic_kernel_entropy_meets_upper_bound() {
    let spec = fixed_spec(DiffusionKind::Gaussian, 12, 2).unwrap();
    let dm = DiffusionModel::analytic(spec.clone()).unwrap();
    let data = normal_batch(2000, 2, 2);
    for t in 2..=12 {
        let r = entropy_bounds(&spec, t, &data).unwrap();
        let h = reverse_kernel_entropy(&dm, &data, t).unwrap();
        assert!((h - r.upper).abs() < 1e-9);
    }
}

#[test]
fn binomial_bounds_at_full_rate_step() {
    let spec = fixed_spec(DiffusionKind::Binomial, 8, 4).unwrap();
    let data = Array2::from_shape_fn((10, 4), |(i, j)| ((i + j) % 2) as f64);
    let r = entropy_bounds(&spec, 8, &data).unwrap();
    assert!((r.upper - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
    for r in entropy_bound_table(&spec, &data).unwrap() {
        assert!(r.lower <= r.upper + 1e-12);
    }
    assert!(entropy_bounds(&spec, 3, &Array2::from_elem((2, 4), 0.5)).is_err());
}

#[test]
fn energy_distance_separates_shifted_samples() {
    let a = normal_batch(300, 2, 1);
    let b = normal_batch(300, 2, 2);
    let shifted = &normal_batch(300, 2, 3) + 1.0;
    assert_eq!(energy_distance(&a, &a).unwrap(), 0.0);
    let pool = ndarray::concatenate(Axis(0), &[a.view(), b.view()]).unwrap();
    let q = energy_null_quantile(&pool, 150, 50, 0.95, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(energy_distance(&a, &shifted).unwrap() > q);
    assert!(energy_distance(&a, &b).unwrap() < 3.0 * q);
}
