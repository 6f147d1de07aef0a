use bwnn::harness::{
    compare_pair, generalization_suite, gradcheck, ks_gaussian, make_synthetic, median, paired_ttest, pearson,
    run_cell, verify_quasi, verify_quasi_with, ModelKind, QuasiSetup, SuiteConfig, SyntheticKind, GRADCHECK_TOL, T_CAP,
};
use bwnn::network::{init_params, Dims, ThetaInit};
use bwnn::ntk::{kernel_ridge_fit, zonal_cross, BwnnNtk, KernelMatrix, NtkMethod, Provenance};
use bwnn::num_core::Rng;
use bwnn::quant::QuantBuffer;
use bwnn::quasi::tilde_varsigma_sq;
use bwnn::trainer::Optimizer;
use nalgebra::DMatrix;
use proptest::prelude::*;
use std::f64::consts::PI;

fn small_suite() -> SuiteConfig {
    SuiteConfig { width: 24, epochs: 4, lr_grid: vec![0.01, 0.1], batch_size: 32, ..SuiteConfig::default() }
}

#[test]
fn synthetic_rows_are_unit_norm_and_split_covers() {
    for kind in [SyntheticKind::TwoGaussians, SyntheticKind::RandomFourier { frequency: 1.0 }] {
        let ds = make_synthetic(kind, 57, 6, 0.4, 3).unwrap();
        ds.validate().unwrap();
        for c in ds.x.column_iter() {
            assert!((c.norm() - 1.0).abs() < 1e-9);
        }
        let mut all: Vec<usize> = ds.train.iter().chain(&ds.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..57).collect::<Vec<_>>());
        assert_eq!(ds, make_synthetic(kind, 57, 6, 0.4, 3).unwrap());
    }
    assert!(make_synthetic(SyntheticKind::TwoGaussians, 10, 6, 0.1, 0).is_err());
    assert!(make_synthetic(SyntheticKind::TwoGaussians, 30, 1, 0.1, 0).is_err());
}

#[test]
fn noiseless_two_gaussians_are_linearly_separable() {
    let ds = make_synthetic(SyntheticKind::TwoGaussians, 80, 7, 0.0, 4).unwrap();
    assert!(ds.targets.iter().all(|&t| t == 1.0 || t == -1.0));
    // linear kernel ridge on all rows
    let all: Vec<usize> = (0..80).collect();
    let k = KernelMatrix::new(ds.x.tr_mul(&ds.x), Provenance::Gaussian { bandwidth: 0.0 });
    let c = kernel_ridge_fit(&k, &ds.target_matrix(&all), 1e-6).unwrap();
    let pred = &k.gram * c;
    assert_eq!(ds.metric(&all, &pred), 1.0);
}

#[test]
fn low_frequency_target_is_learnable_by_ntk_ridge() {
    let ds = make_synthetic(SyntheticKind::RandomFourier { frequency: 1.0 }, 300, 3, 0.0, 5).unwrap();
    let ntk = BwnnNtk::new(1.0, 3, 1.0 / 3.0, 1.0, NtkMethod::ClosedForm).unwrap();
    let f = |t: f64| ntk.eval(t).unwrap();
    let xf = ds.columns(&ds.train);
    let k = KernelMatrix::new(zonal_cross(&xf, &xf, f), Provenance::Rgauss { d: 3, xi: 1.0 });
    let c = kernel_ridge_fit(&k, &ds.target_matrix(&ds.train), 1e-4).unwrap();
    let pred = zonal_cross(&ds.columns(&ds.test), &xf, f) * c;
    let mse = ds.metric(&ds.test, &pred);
    let y: Vec<f64> = ds.test.iter().map(|&i| ds.targets[i]).collect();
    let var = y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64;
    assert!(mse < 0.05, "mse = {mse}");
    assert!(mse < 0.1 * var, "mse = {mse}, mean square target = {var}");
}

// Student-t CDF with 3 degrees of freedom in closed form
fn t3_cdf(t: f64) -> f64 {
    let u = t / 3f64.sqrt();
    0.5 + (u / (1.0 + u * u) + u.atan()) / PI
}

#[test]
fn paired_ttest_matches_hand_computation() {
    let r = paired_ttest(&[1.0, 2.0, 3.0, 4.0], &[0.0; 4]).unwrap();
    let sd = (5.0f64 / 3.0).sqrt();
    let t = 2.5 / (sd / 2.0);
    assert!((r.t - t).abs() < 1e-12);
    assert!((r.p - 2.0 * (1.0 - t3_cdf(t))).abs() < 1e-9);
    assert!((r.p_greater - (1.0 - t3_cdf(t))).abs() < 1e-9);
    assert!(!r.degenerate);
    let r = paired_ttest(&[0.0; 4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert!((r.p_greater - t3_cdf(-t).mul_add(-1.0, 1.0)).abs() < 1e-9);
}

#[test]
fn paired_ttest_degenerate_cases() {
    let r = paired_ttest(&[0.3, 0.5, 0.1], &[0.3, 0.5, 0.1]).unwrap();
    assert!(r.degenerate && r.t == 0.0 && r.p == 1.0);
    let r = paired_ttest(&[2.0, 3.0, 4.0, 5.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert!(r.degenerate && r.t == T_CAP && r.p < 1e-6);
    let r = paired_ttest(&[1.0, 2.0, 3.0], &[0.0, 1.0, 2.0]).unwrap();
    assert!(r.degenerate);
    assert!((r.mean_diff - 1.0).abs() < 1e-15);
    assert!(paired_ttest(&[1.0], &[2.0]).is_err());
    assert!(paired_ttest(&[1.0, 2.0], &[2.0]).is_err());
}

#[test]
fn ks_and_pearson_helpers() {
    let mut rng = Rng::new(6);
    let s: Vec<f64> = (0..2000).map(|_| 0.5 + 2.0 * rng.normal()).collect();
    assert!(ks_gaussian(&s, 0.5, 4.0) < 0.05);
    assert!(ks_gaussian(&s, 0.0, 1.0) > 0.1);
    let a: Vec<f64> = (0..50).map(|i| i as f64).collect();
    let b: Vec<f64> = a.iter().map(|v| -2.0 * v).collect();
    assert!((pearson(&a, &b) + 1.0).abs() < 1e-15);
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
}

#[test]
fn verify_quasi_passes_at_moderate_width() {
    let r = verify_quasi(800, 1000, 16, 7, QuasiSetup::default()).unwrap();
    assert!(r.ks_pass_rate >= 0.95, "{}", r.ks_pass_rate);
    assert!(r.pearson_r > 0.99, "{}", r.pearson_r);
    assert!(r.pass);
    assert!(verify_quasi(50, 1000, 16, 7, QuasiSetup::default()).is_err());
    assert!(verify_quasi(200, 100, 16, 7, QuasiSetup::default()).is_err());
}

#[test]
fn verify_quasi_with_deterministic_weights() {
    let mut rng = Rng::new(8);
    let mut p = init_params(Dims::new(10, 150, 16).unwrap(), 1.0, 1.0, ThetaInit::Uniform, &mut rng).unwrap();
    p.theta1 = QuantBuffer::new(p.theta1.theta().map(|t| if t >= 0.0 { 1.0 } else { -1.0 })).unwrap();
    let r = verify_quasi_with(&p, 500, 5, 1, 8).unwrap();
    for (q, m) in r.quasi_mean.iter().zip(&r.mc_mean) {
        assert!((q - m).abs() < 1e-12);
    }
}

#[test]
fn quasi_pass_rate_does_not_drop_with_width() {
    // past a few hundred units the rate sits at the KS sampling floor, so compare against a very narrow layer
    let wide: Vec<f64> = (0..5)
        .map(|s| verify_quasi(1600, 1000, 3, 100 + s, QuasiSetup::default()).unwrap().ks_pass_rate)
        .collect();
    let wide = median(&wide);
    let mut rng = Rng::new(100);
    let p = init_params(Dims::new(10, 8, 64).unwrap(), 1.0, 1.0, ThetaInit::Uniform, &mut rng).unwrap();
    let narrow = verify_quasi_with(&p, 1000, 3, 2, 100).unwrap().ks_pass_rate;
    assert!(wide >= 0.95, "1600: {wide}");
    assert!(narrow < wide - 0.2, "8: {narrow}, 1600: {wide}");
}

#[test]
fn gradcheck_passes_on_small_network() {
    let mut rng = Rng::new(9);
    let p = init_params(Dims::new(4, 6, 5).unwrap(), 1.0, 1.0, ThetaInit::Uniform, &mut rng).unwrap();
    let x = bwnn::harness::random_sphere(4, 3, &mut rng);
    let r = gradcheck(&p, &x, tilde_varsigma_sq(1.0, 4, 1.0 / 3.0).unwrap()).unwrap();
    assert_eq!(r.n_checked, 3 * (30 + 10));
    assert!(r.max_rel_err < GRADCHECK_TOL, "{}", r.max_rel_err);
}

#[test]
fn model_compared_with_itself() {
    let ds: Vec<_> = (0..4).map(|s| make_synthetic(SyntheticKind::TwoGaussians, 40, 4, 1.0, s).unwrap()).collect();
    let cfg = small_suite();
    let cells: Vec<_> = ds.iter().map(|d| run_cell(ModelKind::Laplace, d, &cfg, d.seed)).collect();
    let p = compare_pair(&cells, ModelKind::Laplace, ModelKind::Laplace).unwrap();
    assert_eq!((p.gap.t, p.gap.p), (0.0, 1.0));
    assert_eq!(p.gap_ties, 100.0);
    for c in &cells {
        assert!((c.gap - (c.train - c.test)).abs() < 1e-15);
    }
}

#[test]
fn suite_is_reproducible_and_consistent() {
    let ds: Vec<_> = (0..3).map(|s| make_synthetic(SyntheticKind::TwoGaussians, 40, 4, 1.0, 20 + s).unwrap()).collect();
    let cfg = small_suite();
    let a = generalization_suite(&ModelKind::ALL, &ds, &cfg).unwrap();
    let b = generalization_suite(&ModelKind::ALL, &ds, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
    assert_eq!(a.cells.len(), 15);
    assert_eq!(a.pairs.len(), 2);
    for p in &a.pairs {
        assert!((0.0..=1.0).contains(&p.gap.p) && (0.0..=1.0).contains(&p.test.p));
        assert!((p.test_lower + p.test_higher + p.test_ties - 100.0).abs() < 1e-9);
    }
    for c in &a.cells {
        assert!(c.failure.is_none(), "{:?}", c);
        assert_eq!(c.gap, c.train - c.test);
        assert!((0.0..=1.0).contains(&c.train) && (0.0..=1.0).contains(&c.test));
    }
    let csv = a.to_csv().unwrap();
    assert!(csv.starts_with("classifier,n,test_t,test_p,test_lower,test_higher,test_ties"));
    assert!(a.pair(ModelKind::RealNn, ModelKind::Bwnn).is_some());
}

#[test]
fn diverged_cells_are_excluded_from_pairs() {
    let ds: Vec<_> = (0..3).map(|s| make_synthetic(SyntheticKind::TwoGaussians, 40, 4, 1.0, 30 + s).unwrap()).collect();
    let cfg = SuiteConfig { lr_grid: vec![1e4], optimizer: Optimizer::Sgd, ..small_suite() };
    let mut cells: Vec<_> = ds.iter().map(|d| run_cell(ModelKind::RealNn, d, &cfg, d.seed)).collect();
    assert!(cells.iter().all(|c| c.failure.is_some()));
    let ok = small_suite();
    cells.extend(ds.iter().map(|d| run_cell(ModelKind::Bwnn, d, &ok, d.seed)));
    assert!(compare_pair(&cells, ModelKind::RealNn, ModelKind::Bwnn).is_err());
}

#[test]
fn multiclass_metric_uses_argmax() {
    let mut ds = make_synthetic(SyntheticKind::TwoGaussians, 20, 3, 0.5, 1).unwrap();
    ds.labels = Some((0..20).map(|i| i % 3).collect());
    ds.class_names = vec!["a".into(), "b".into(), "c".into()];
    let idx: Vec<usize> = (0..20).collect();
    let y = ds.target_matrix(&idx);
    assert_eq!(y.ncols(), 3);
    assert_eq!(ds.metric(&idx, &y), 1.0);
    let shifted = DMatrix::from_fn(20, 3, |i, j| y[(i, (j + 1) % 3)]);
    assert_eq!(ds.metric(&idx, &shifted), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ttest_p_values_are_probabilities(a in proptest::collection::vec(-5.0f64..5.0, 2..30), shift in -1.0f64..1.0) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v + shift + 0.01 * (i as f64).sin()).collect();
        let r = paired_ttest(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.p));
        prop_assert!((0.0..=1.0).contains(&r.p_greater));
        let s = paired_ttest(&b, &a).unwrap();
        prop_assert!((r.t + s.t).abs() <= 1e-9 * r.t.abs().max(1.0));
    }

    #[test]
    fn resplit_is_a_partition(seed in any::<u64>(), frac in 0.1f64..0.9) {
        let mut ds = make_synthetic(SyntheticKind::TwoGaussians, 33, 3, 0.5, 2).unwrap();
        ds.resplit(frac, seed);
        let mut all: Vec<usize> = ds.train.iter().chain(&ds.test).copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..33).collect::<Vec<_>>());
        prop_assert!(ds.validate().is_ok());
    }
}
