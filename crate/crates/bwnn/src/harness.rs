//! Experiment orchestration: Monte-Carlo checks of the quasi network,
//! synthetic datasets, width sweeps and paired generalization comparisons.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::network::{check_unit, init_params, Dims, ModelParams, ThetaInit};
use crate::ntk::{empirical_ntk, kernel_ridge_fit, zonal_cross, BwnnNtk, KernelMatrix, NtkMethod, Provenance};
use crate::num_core::{gauss_cdf, Rng};
use crate::quasi::{mc_forward_batch, mc_forward_stats, propagate_moments, tilde_varsigma_sq, VarianceMode};
use crate::trainer::{measure_kernel_drift, predict, train, Optimizer, TrainConfig, TrainData, TrainMode};

type CrossKernel = Box<dyn Fn(&DMatrix<f64>, &DMatrix<f64>) -> Result<DMatrix<f64>>>;

/// Inputs are stored as the columns of a d x m matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub seed: u64,
    pub x: DMatrix<f64>,
    /// Regression targets, or +-1 for two-class data.
    pub targets: Vec<f64>,
    /// Class index per row when the data are labelled.
    pub labels: Option<Vec<usize>>,
    pub class_names: Vec<String>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.len();
        if self.targets.len() != m {
            return Err(Error::Shape(format!("{} targets for {m} rows", self.targets.len())));
        }
        for (i, col) in self.x.column_iter().enumerate() {
            check_unit(col.as_slice()).map_err(|_| Error::Data(format!("row {i} is not unit norm")))?;
        }
        if let Some(l) = &self.labels {
            if l.len() != m || l.iter().any(|&c| c >= self.n_classes()) {
                return Err(Error::Data("labels out of range".into()));
            }
        }
        let mut seen = vec![false; m];
        for &i in self.train.iter().chain(&self.test) {
            if i >= m || seen[i] {
                return Err(Error::Data(format!("split index {i} repeated or out of range")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Data("splits do not cover every row".into()));
        }
        Ok(())
    }

    /// Shuffled split with `test_fraction` of the rows held out.
    pub fn resplit(&mut self, test_fraction: f64, seed: u64) {
        let m = self.len();
        let mut idx: Vec<usize> = (0..m).collect();
        shuffle(&mut idx, &mut Rng::with_stream(seed, 0x73706c74));
        let n_test = ((m as f64) * test_fraction).round() as usize;
        self.test = idx[..n_test].to_vec();
        self.train = idx[n_test..].to_vec();
    }

    pub fn columns(&self, idx: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim(), idx.len(), |r, c| self.x[(r, idx[c])])
    }

    /// Regression targets for the rows `idx`: one column for regression and
    /// two-class data (+-1), one-hot columns otherwise.
    pub fn target_matrix(&self, idx: &[usize]) -> DMatrix<f64> {
        match &self.labels {
            Some(l) if self.n_classes() > 2 => {
                DMatrix::from_fn(idx.len(), self.n_classes(), |r, k| if l[idx[r]] == k { 1.0 } else { 0.0 })
            }
            _ => DMatrix::from_fn(idx.len(), 1, |r, _| self.targets[idx[r]]),
        }
    }

    /// Accuracy for labelled data, mean squared error otherwise.
    pub fn metric(&self, idx: &[usize], pred: &DMatrix<f64>) -> f64 {
        match &self.labels {
            Some(l) => {
                let hits = idx
                    .iter()
                    .enumerate()
                    .filter(|&(r, &i)| {
                        let guess = if pred.ncols() == 1 {
                            usize::from(pred[(r, 0)] >= 0.0)
                        } else {
                            pred.row(r).transpose().argmax().0
                        };
                        let want = if pred.ncols() == 1 { usize::from(self.targets[i] > 0.0) } else { l[i] };
                        guess == want
                    })
                    .count();
                hits as f64 / idx.len().max(1) as f64
            }
            None => {
                idx.iter().enumerate().map(|(r, &i)| (pred[(r, 0)] - self.targets[i]).powi(2)).sum::<f64>()
                    / idx.len().max(1) as f64
            }
        }
    }
}

pub(crate) fn shuffle<T>(v: &mut [T], rng: &mut Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.below(i + 1);
        v.swap(i, j);
    }
}

pub fn normalize_columns(x: &mut DMatrix<f64>) -> Result<()> {
    for (i, mut col) in x.column_iter_mut().enumerate() {
        let n = col.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Data(format!("sample {i} has zero norm")));
        }
        col /= n;
    }
    Ok(())
}

pub fn random_sphere(d: usize, m: usize, rng: &mut Rng) -> DMatrix<f64> {
    loop {
        let mut x = DMatrix::from_fn(d, m, |_, _| rng.normal());
        if normalize_columns(&mut x).is_ok() {
            return x;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SyntheticKind {
    /// Two isotropic clouds around +-u, projected onto the sphere.
    TwoGaussians,
    /// Sum of a few random plane waves of the given frequency.
    RandomFourier { frequency: f64 },
}

const FOURIER_TERMS: usize = 8;

pub fn make_synthetic(kind: SyntheticKind, m: usize, d: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if m < 20 || d < 2 {
        return Err(Error::InvalidArgument(format!("need m >= 20 and d >= 2, got m={m}, d={d}")));
    }
    if !(noise >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise must be >= 0, got {noise}")));
    }
    let mut rng = Rng::new(seed);
    let mut ds = match kind {
        SyntheticKind::TwoGaussians => {
            let u = random_sphere(d, 1, &mut rng);
            let labels: Vec<usize> = (0..m).map(|i| i % 2).collect();
            let mut x = DMatrix::from_fn(d, m, |r, c| {
                let s = if labels[c] == 1 { 1.0 } else { -1.0 };
                s * u[r] + noise * rng.normal()
            });
            normalize_columns(&mut x)?;
            let targets = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
            Dataset {
                name: format!("two-gaussians-{seed}"),
                seed,
                x,
                targets,
                labels: Some(labels),
                class_names: vec!["neg".into(), "pos".into()],
                train: vec![],
                test: vec![],
            }
        }
        SyntheticKind::RandomFourier { frequency } => {
            let omega = random_sphere(d, FOURIER_TERMS, &mut rng);
            let amp: Vec<f64> = (0..FOURIER_TERMS).map(|_| 2.0 * rng.uniform() - 1.0).collect();
            let phase: Vec<f64> = (0..FOURIER_TERMS).map(|_| std::f64::consts::TAU * rng.uniform()).collect();
            let x = random_sphere(d, m, &mut rng);
            let proj = omega.tr_mul(&x);
            let targets = (0..m)
                .map(|c| {
                    let clean: f64 = (0..FOURIER_TERMS)
                        .map(|j| amp[j] * (frequency * proj[(j, c)] + phase[j]).cos())
                        .sum::<f64>()
                        / FOURIER_TERMS as f64;
                    clean + noise * rng.normal()
                })
                .collect();
            Dataset {
                name: format!("random-fourier-{seed}"),
                seed,
                x,
                targets,
                labels: None,
                class_names: vec![],
                train: vec![],
                test: vec![],
            }
        }
    };
    ds.resplit(0.3, seed);
    Ok(ds)
}

/// Kolmogorov-Smirnov distance between a sample and N(mean, var).
pub fn ks_gaussian(samples: &[f64], mean: f64, var: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let sd = var.sqrt();
    s.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = if sd > 0.0 {
                gauss_cdf((v - mean) / sd)
            } else if v >= mean {
                1.0
            } else {
                0.0
            };
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuasiCheck {
    pub d: usize,
    pub d1: usize,
    pub d2: usize,
    pub n_samples: usize,
    pub seed: u64,
    /// KS distance per tested (probe, neuron).
    pub ks: Vec<f64>,
    pub ks_threshold: f64,
    pub ks_pass_rate: f64,
    pub quasi_mean: Vec<f64>,
    pub mc_mean: Vec<f64>,
    pub pearson_r: f64,
    pub r_threshold: f64,
    pub pass: bool,
}

pub const KS_THRESHOLD: f64 = 0.05;
pub const KS_PASS_RATE: f64 = 0.95;
pub const PEARSON_THRESHOLD: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuasiSetup {
    pub d: usize,
    pub d2: usize,
    /// Probes whose hidden neurons go through the KS test.
    pub ks_probes: usize,
    pub c: f64,
    pub beta: f64,
}

impl Default for QuasiSetup {
    fn default() -> Self {
        QuasiSetup { d: 10, d2: 64, ks_probes: 2, c: 1.0, beta: 1.0 }
    }
}

/// Compares the sampled binary network with its quasi network at a fresh
/// uniform initialization. Hidden pre-activations are tested for normality
/// against N(nu, varsigma^2) with exact per-neuron variances, and output
/// means are correlated across `n_probes` random inputs.
pub fn verify_quasi(d1: usize, n_samples: usize, n_probes: usize, seed: u64, setup: QuasiSetup) -> Result<QuasiCheck> {
    if d1 < 100 || n_samples < 500 {
        return Err(Error::InvalidArgument(format!("need d1 >= 100 and n >= 500, got d1={d1}, n={n_samples}")));
    }
    if n_probes < 3 {
        return Err(Error::InvalidArgument("need at least 3 probes".into()));
    }
    let mut rng = Rng::new(seed);
    let params = init_params(Dims::new(setup.d, d1, setup.d2)?, setup.c, setup.beta, ThetaInit::Uniform, &mut rng)?;
    verify_quasi_with(&params, n_samples, n_probes, setup.ks_probes, seed)
}

pub fn verify_quasi_with(
    params: &ModelParams,
    n_samples: usize,
    n_probes: usize,
    ks_probes: usize,
    seed: u64,
) -> Result<QuasiCheck> {
    let d = params.dims.d;
    let mut rng = Rng::with_stream(seed, 1);
    let probes = random_sphere(d, n_probes, &mut rng);
    let mut ks = Vec::new();
    let ks_probes = n_probes.min(ks_probes);
    for k in 0..ks_probes {
        let x = probes.column(k).into_owned();
        let st = propagate_moments(params, x.as_slice(), VarianceMode::Exact)?;
        let mc = mc_forward_stats(params, x.as_slice(), n_samples, &mut rng)?;
        for j in 0..params.dims.d2 {
            let col: Vec<f64> = mc.y1.column(j).iter().copied().collect();
            ks.push(ks_gaussian(&col, st.nu1[j], st.varsigma1_sq[j]));
        }
    }
    let quasi_mean = probes
        .column_iter()
        .map(|c| propagate_moments(params, c.into_owned().as_slice(), VarianceMode::Exact).map(|s| s.ybar))
        .collect::<Result<Vec<_>>>()?;
    let mc_mean: Vec<f64> = mc_forward_batch(params, &probes, n_samples, &mut rng)?.into_iter().map(|p| p.0).collect();
    let pass_rate = ks.iter().filter(|&&v| v < KS_THRESHOLD).count() as f64 / ks.len().max(1) as f64;
    let r = pearson(&quasi_mean, &mc_mean);
    Ok(QuasiCheck {
        d,
        d1: params.dims.d1,
        d2: params.dims.d2,
        n_samples,
        seed,
        ks,
        ks_threshold: KS_THRESHOLD,
        ks_pass_rate: pass_rate,
        quasi_mean,
        mc_mean,
        pearson_r: r,
        r_threshold: PEARSON_THRESHOLD,
        pass: pass_rate >= KS_PASS_RATE && r > PEARSON_THRESHOLD,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    /// Two-sided p-value.
    pub p: f64,
    /// One-sided p-value for mean(a) > mean(b).
    pub p_greater: f64,
    /// Set when the differences have zero spread; t is then 0 or +-T_CAP.
    pub degenerate: bool,
}

pub const T_CAP: f64 = 1e12;

pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument(format!("need two equal samples of size >= 2, got {} and {}", a.len(), b.len())));
    }
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diff.len() as f64;
    let mean = diff.iter().sum::<f64>() / n;
    let var = diff.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    let scale = diff.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if sd <= 1e-14 * scale.max(f64::MIN_POSITIVE) || sd == 0.0 {
        let (t, p, pg) = if mean == 0.0 {
            (0.0, 1.0, 0.5)
        } else if mean > 0.0 {
            (T_CAP, 0.0, 0.0)
        } else {
            (-T_CAP, 0.0, 1.0)
        };
        return Ok(TTest { n: diff.len(), mean_diff: mean, t, p, p_greater: pg, degenerate: true });
    }
    let t = mean / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Domain(e.to_string()))?;
    let upper = dist.sf(t);
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { n: diff.len(), mean_diff: mean, t, p, p_greater: upper, degenerate: false })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    RealNn,
    Bwnn,
    Laplace,
    Gaussian,
    BwnnNtk,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] =
        [ModelKind::RealNn, ModelKind::Bwnn, ModelKind::Laplace, ModelKind::Gaussian, ModelKind::BwnnNtk];

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::RealNn => "real-nn",
            ModelKind::Bwnn => "bwnn",
            ModelKind::Laplace => "laplace",
            ModelKind::Gaussian => "gaussian",
            ModelKind::BwnnNtk => "bwnn-ntk",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub width: usize,
    pub c: f64,
    pub beta: f64,
    pub lr_grid: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub optimizer: Optimizer,
    pub bandwidth_scales: Vec<f64>,
    pub ridge_grid: Vec<f64>,
    /// Fraction of the training rows used to pick hyperparameters.
    pub validation_fraction: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            width: 512,
            c: 1.0,
            beta: 1.0,
            lr_grid: vec![1e-3, 1e-2, 1e-1],
            epochs: 100,
            batch_size: 100,
            weight_decay: 1e-3,
            optimizer: Optimizer::Adam,
            bandwidth_scales: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            ridge_grid: vec![1e-3, 1e-2, 1e-1, 1.0],
            validation_fraction: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub model: ModelKind,
    pub dataset: String,
    pub seed: u64,
    pub train: f64,
    pub test: f64,
    pub gap: f64,
    /// Selected learning rate or bandwidth multiplier.
    pub hyper: Option<f64>,
    pub ridge: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairComparison {
    pub first: ModelKind,
    pub second: ModelKind,
    pub n: usize,
    pub mean_gap_first: f64,
    pub mean_gap_second: f64,
    pub gap: TTest,
    pub test: TTest,
    /// Percent of datasets where the first model has the lower / higher /
    /// equal test metric.
    pub test_lower: f64,
    pub test_higher: f64,
    pub test_ties: f64,
    pub gap_lower: f64,
    pub gap_higher: f64,
    pub gap_ties: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub cells: Vec<Cell>,
    pub pairs: Vec<PairComparison>,
}

impl ComparisonReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Data(e.to_string());
        w.write_record([
            "classifier", "n", "test_t", "test_p", "test_lower", "test_higher", "test_ties", "gap_t", "gap_p",
            "gap_p_greater", "gap_lower", "gap_higher", "gap_ties",
        ])
        .map_err(err)?;
        for p in &self.pairs {
            w.write_record([
                format!("{}-{}", p.first.name(), p.second.name()),
                p.n.to_string(),
                format!("{:.4}", p.test.t),
                format!("{:.4}", p.test.p),
                format!("{:.2}", p.test_lower),
                format!("{:.2}", p.test_higher),
                format!("{:.2}", p.test_ties),
                format!("{:.4}", p.gap.t),
                format!("{:.4}", p.gap.p),
                format!("{:.4}", p.gap.p_greater),
                format!("{:.2}", p.gap_lower),
                format!("{:.2}", p.gap_higher),
                format!("{:.2}", p.gap_ties),
            ])
            .map_err(err)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Data(e.to_string()))?).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn pair(&self, first: ModelKind, second: ModelKind) -> Option<&PairComparison> {
        self.pairs.iter().find(|p| p.first == first && p.second == second)
    }
}

fn median_pairwise_distance(x: &DMatrix<f64>) -> f64 {
    let g = x.tr_mul(x);
    let m = x.ncols();
    let mut d = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            d.push((2.0 - 2.0 * g[(i, j)]).max(0.0).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    if d.is_empty() {
        1.0
    } else {
        d[d.len() / 2]
    }
}

/// Fits `model` on `fit` rows and returns predictions for each `eval` set.
fn fit_predict(
    model: ModelKind,
    ds: &Dataset,
    fit: &[usize],
    evals: &[&[usize]],
    (hyper, ridge): (f64, f64),
    cfg: &SuiteConfig,
    seed: u64,
) -> Result<Vec<DMatrix<f64>>> {
    let xf = ds.columns(fit);
    let yf = ds.target_matrix(fit);
    let d = ds.dim();
    match model {
        ModelKind::RealNn | ModelKind::Bwnn => {
            let dims = Dims::new(d, cfg.width, cfg.width)?;
            let vs = tilde_varsigma_sq(cfg.c, d, 1.0 / 3.0)?;
            let mode = if model == ModelKind::Bwnn { TrainMode::Binaryconnect } else { TrainMode::Real };
            let eval_mode = if model == ModelKind::Bwnn { TrainMode::Quasi } else { TrainMode::Real };
            let mut outs: Vec<DMatrix<f64>> = evals.iter().map(|e| DMatrix::zeros(e.len(), yf.ncols())).collect();
            for k in 0..yf.ncols() {
                let mut rng = Rng::with_stream(seed, k as u64);
                let p0 = init_params(dims, cfg.c, cfg.beta, ThetaInit::Uniform, &mut rng)?;
                let data = TrainData::new(xf.clone(), yf.column(k).iter().copied().collect())?;
                let tc = TrainConfig {
                    mode,
                    lr: hyper,
                    epochs: cfg.epochs,
                    batch_size: cfg.batch_size,
                    weight_decay: cfg.weight_decay,
                    seed: seed ^ (k as u64) << 32,
                    record_drift_every: 0,
                    optimizer: cfg.optimizer,
                    varsigma_sq: vs,
                };
                let out = train(&p0, &data, &tc)?;
                for (o, e) in outs.iter_mut().zip(evals) {
                    let y = predict(&out.params, &ds.columns(e), eval_mode, vs, &mut rng, 1)?;
                    o.column_mut(k).copy_from_slice(&y);
                }
            }
            Ok(outs)
        }
        ModelKind::Laplace | ModelKind::Gaussian | ModelKind::BwnnNtk => {
            let kern: CrossKernel = match model {
                ModelKind::BwnnNtk => {
                    let ntk = BwnnNtk::new(cfg.c, d, 1.0 / 3.0, cfg.beta, NtkMethod::ClosedForm)?;
                    Box::new(move |a, b| {
                        let g = a.tr_mul(b);
                        let mut out = DMatrix::zeros(g.nrows(), g.ncols());
                        for (o, t) in out.iter_mut().zip(g.iter()) {
                            *o = ntk.eval(t.clamp(-1.0, 1.0))?;
                        }
                        Ok(out)
                    })
                }
                _ => {
                    let bw = hyper * median_pairwise_distance(&xf);
                    let laplace = model == ModelKind::Laplace;
                    Box::new(move |a, b| {
                        Ok(zonal_cross(a, b, |t| {
                            let r = (2.0 - 2.0 * t).max(0.0).sqrt() / bw;
                            if laplace {
                                (-r).exp()
                            } else {
                                (-r * r).exp()
                            }
                        }))
                    })
                }
            };
            let provenance = match model {
                ModelKind::Laplace => Provenance::Laplace { bandwidth: hyper },
                ModelKind::Gaussian => Provenance::Gaussian { bandwidth: hyper },
                _ => Provenance::AnalyticBwnn { c: cfg.c, d, var_theta: 1.0 / 3.0, beta: cfg.beta },
            };
            let gram = KernelMatrix::new(kern(&xf, &xf)?, provenance);
            let coeffs = kernel_ridge_fit(&gram, &yf, ridge)?;
            evals.iter().map(|e| Ok(kern(&ds.columns(e), &xf)? * &coeffs)).collect()
        }
    }
}

/// (learning rate or bandwidth multiplier, ridge) candidates.
fn hyper_grid(model: ModelKind, cfg: &SuiteConfig) -> Vec<(f64, f64)> {
    let with_ridge = |hs: &[f64]| -> Vec<(f64, f64)> {
        hs.iter().flat_map(|&h| cfg.ridge_grid.iter().map(move |&r| (h, r))).collect()
    };
    match model {
        ModelKind::RealNn | ModelKind::Bwnn => cfg.lr_grid.iter().map(|&l| (l, 0.0)).collect(),
        ModelKind::Laplace | ModelKind::Gaussian => with_ridge(&cfg.bandwidth_scales),
        ModelKind::BwnnNtk => with_ridge(&[1.0]),
    }
}

fn better(ds: &Dataset, a: f64, b: f64) -> bool {
    if ds.labels.is_some() {
        a > b
    } else {
        a < b
    }
}

/// Picks the hyperparameter on a validation split of the training rows,
/// then refits on all training rows.
pub fn run_cell(model: ModelKind, ds: &Dataset, cfg: &SuiteConfig, seed: u64) -> Cell {
    let mut cell = Cell {
        model,
        dataset: ds.name.clone(),
        seed,
        train: f64::NAN,
        test: f64::NAN,
        gap: f64::NAN,
        hyper: None,
        ridge: None,
        failure: None,
    };
    let grid = hyper_grid(model, cfg);
    let mut tr = ds.train.clone();
    shuffle(&mut tr, &mut Rng::with_stream(seed, 0x76616c));
    let n_val = ((tr.len() as f64) * cfg.validation_fraction).round() as usize;
    let (val, fit) = tr.split_at(n_val);
    let mut best: Option<((f64, f64), f64)> = None;
    if grid.len() > 1 && !val.is_empty() {
        for &h in &grid {
            if let Ok(p) = fit_predict(model, ds, fit, &[val], h, cfg, seed) {
                let v = ds.metric(val, &p[0]);
                if v.is_finite() && best.is_none_or(|(_, b)| better(ds, v, b)) {
                    best = Some((h, v));
                }
            }
        }
    } else {
        best = Some((grid[0], 0.0));
    }
    let Some((h, _)) = best else {
        cell.failure = Some("every hyperparameter diverged".into());
        return cell;
    };
    cell.hyper = Some(h.0);
    if !matches!(model, ModelKind::RealNn | ModelKind::Bwnn) {
        cell.ridge = Some(h.1);
    }
    match fit_predict(model, ds, &ds.train, &[&ds.train, &ds.test], h, cfg, seed) {
        Ok(p) => {
            cell.train = ds.metric(&ds.train, &p[0]);
            cell.test = ds.metric(&ds.test, &p[1]);
            cell.gap = cell.train - cell.test;
        }
        Err(e) => cell.failure = Some(e.to_string()),
    }
    cell
}

fn buckets(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let n = a.len().max(1) as f64;
    let lower = a.iter().zip(b).filter(|(x, y)| x < y).count() as f64;
    let higher = a.iter().zip(b).filter(|(x, y)| x > y).count() as f64;
    (100.0 * lower / n, 100.0 * higher / n, 100.0 * (n - lower - higher) / n)
}

pub fn compare_pair(cells: &[Cell], first: ModelKind, second: ModelKind) -> Result<PairComparison> {
    let mut ga = Vec::new();
    let mut gb = Vec::new();
    let mut ta = Vec::new();
    let mut tb = Vec::new();
    for a in cells.iter().filter(|c| c.model == first && c.failure.is_none()) {
        if let Some(b) = cells
            .iter()
            .find(|c| c.model == second && c.dataset == a.dataset && c.seed == a.seed && c.failure.is_none())
        {
            ga.push(a.gap);
            gb.push(b.gap);
            ta.push(a.test);
            tb.push(b.test);
        }
    }
    let gap = paired_ttest(&ga, &gb)?;
    let test = paired_ttest(&ta, &tb)?;
    let (tl, th, tt) = buckets(&ta, &tb);
    let (gl, gh, gt) = buckets(&ga, &gb);
    let n = ga.len() as f64;
    Ok(PairComparison {
        first,
        second,
        n: ga.len(),
        mean_gap_first: ga.iter().sum::<f64>() / n,
        mean_gap_second: gb.iter().sum::<f64>() / n,
        gap,
        test,
        test_lower: tl,
        test_higher: th,
        test_ties: tt,
        gap_lower: gl,
        gap_higher: gh,
        gap_ties: gt,
    })
}

/// Runs every model on every dataset and compares real vs binary networks
/// and Laplace vs Gaussian kernels. Each dataset's own seed drives its cells.
pub fn generalization_suite(models: &[ModelKind], datasets: &[Dataset], cfg: &SuiteConfig) -> Result<ComparisonReport> {
    if datasets.len() < 2 {
        return Err(Error::InvalidArgument("need at least two datasets".into()));
    }
    for ds in datasets {
        ds.validate()?;
    }
    let jobs: Vec<(ModelKind, &Dataset)> = datasets.iter().flat_map(|ds| models.iter().map(move |&m| (m, ds))).collect();
    let cells: Vec<Cell> = jobs.par_iter().map(|&(m, ds)| run_cell(m, ds, cfg, ds.seed)).collect();
    let mut pairs = Vec::new();
    for (a, b) in [(ModelKind::RealNn, ModelKind::Bwnn), (ModelKind::Laplace, ModelKind::Gaussian)] {
        if models.contains(&a) && models.contains(&b) {
            pairs.push(compare_pair(&cells, a, b)?);
        }
    }
    Ok(ComparisonReport { cells, pairs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthSweep {
    pub widths: Vec<usize>,
    /// values[w][s]: measurement at width w for seed s.
    pub values: Vec<Vec<f64>>,
    pub medians: Vec<f64>,
}

impl WidthSweep {
    fn new(widths: &[usize], values: Vec<Vec<f64>>) -> Self {
        let medians = values.iter().map(|v| median(v)).collect();
        WidthSweep { widths: widths.to_vec(), values, medians }
    }

    pub fn strictly_decreasing(&self) -> bool {
        self.medians.windows(2).all(|w| w[1] < w[0])
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.medians.windows(2).map(|w| w[1] / w[0]).collect()
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSetup {
    pub d: usize,
    pub c: f64,
    pub beta: f64,
    pub probes: usize,
}

impl Default for SweepSetup {
    fn default() -> Self {
        SweepSetup { d: 5, c: 1.0, beta: 1.0, probes: 16 }
    }
}

/// Relative Frobenius error between the empirical quasi NTK at d1 = d2 =
/// width and the infinite-width kernel.
pub fn ntk_convergence(widths: &[usize], seeds: &[u64], setup: SweepSetup) -> Result<WidthSweep> {
    let var = 1.0 / 3.0;
    let vs = tilde_varsigma_sq(setup.c, setup.d, var)?;
    let limit = BwnnNtk::new(setup.c, setup.d, var, setup.beta, NtkMethod::ClosedForm)?;
    let mut values = Vec::new();
    for &w in widths {
        let row = seeds
            .par_iter()
            .map(|&s| {
                let mut rng = Rng::new(s);
                let probes = random_sphere(setup.d, setup.probes, &mut rng);
                let p = init_params(Dims::new(setup.d, w, w)?, setup.c, setup.beta, ThetaInit::Uniform, &mut rng)?;
                let emp = empirical_ntk(&p, &probes, vs)?;
                Ok(emp.rel_frobenius(&limit.gram(&probes)?))
            })
            .collect::<Result<Vec<f64>>>()?;
        values.push(row);
    }
    Ok(WidthSweep::new(widths, values))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftSetup {
    pub d: usize,
    pub d1: usize,
    pub samples: usize,
    pub steps: usize,
    pub lr: f64,
    pub c: f64,
    pub beta: f64,
}

impl Default for DriftSetup {
    fn default() -> Self {
        DriftSetup { d: 5, d1: 512, samples: 16, steps: 100, lr: 0.5, c: 1.0, beta: 1.0 }
    }
}

/// Kernel drift after a fixed full-batch quasi-network training budget, per
/// output width d2, on random +-1 targets at the training inputs.
pub fn drift_sweep(widths: &[usize], seeds: &[u64], setup: DriftSetup) -> Result<WidthSweep> {
    let vs = tilde_varsigma_sq(setup.c, setup.d, 1.0 / 3.0)?;
    let mut values = Vec::new();
    for &w in widths {
        let row = seeds
            .par_iter()
            .map(|&s| {
                let mut rng = Rng::new(s);
                let x = random_sphere(setup.d, setup.samples, &mut rng);
                let y = (0..setup.samples).map(|_| if rng.uniform() < 0.5 { -1.0 } else { 1.0 }).collect();
                let p0 = init_params(Dims::new(setup.d, setup.d1, w)?, setup.c, setup.beta, ThetaInit::Uniform, &mut rng)?;
                let cfg = TrainConfig {
                    mode: TrainMode::Quasi,
                    lr: setup.lr,
                    epochs: setup.steps,
                    batch_size: setup.samples,
                    weight_decay: 0.0,
                    seed: s,
                    record_drift_every: 0,
                    optimizer: Optimizer::Sgd,
                    varsigma_sq: vs,
                };
                let out = train(&p0, &TrainData::new(x.clone(), y)?, &cfg)?;
                measure_kernel_drift(&p0, &out.params, &x, vs)
            })
            .collect::<Result<Vec<f64>>>()?;
        values.push(row);
    }
    Ok(WidthSweep::new(widths, values))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub n_checked: usize,
    pub max_rel_err: f64,
    pub step: f64,
}

pub const GRADCHECK_TOL: f64 = 1e-5;

fn rel_err(fd: f64, an: f64, floor: f64) -> f64 {
    (fd - an).abs() / (fd.abs().max(an.abs())).max(floor)
}

/// Central differences of the quasi-network output against its analytic
/// gradient for every trainable entry, at each column of `inputs`.
/// Differences below `1e-7 * max |gradient|` are judged on absolute scale.
pub fn gradcheck(params: &ModelParams, inputs: &DMatrix<f64>, varsigma_sq: f64) -> Result<GradcheckReport> {
    let mode = VarianceMode::Limit { varsigma_sq };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for col in inputs.column_iter() {
        let x = col.into_owned();
        let x = x.as_slice();
        let st = propagate_moments(params, x, mode)?;
        let g = crate::quasi::quasi_backward(params, x, &st, 1.0)?;
        let floor = 1e-7
            * g.d_theta1.amax().max(g.d_b1.amax()).max(g.d_w2.amax()).max(f64::MIN_POSITIVE);
        let out = |p: &ModelParams| propagate_moments(p, x, mode).map(|s| s.ybar);
        let (d1, d2) = params.theta1.shape();
        for i in 0..d1 {
            for j in 0..d2 {
                let mut a = params.clone();
                let mut b = params.clone();
                a.theta1.theta_mut()[(i, j)] += h;
                b.theta1.theta_mut()[(i, j)] -= h;
                let fd = (out(&a)? - out(&b)?) / (2.0 * h);
                worst = worst.max(rel_err(fd, g.d_theta1[(i, j)], floor));
                n += 1;
            }
        }
        for j in 0..d2 {
            let mut a = params.clone();
            let mut b = params.clone();
            a.b1[j] += h;
            b.b1[j] -= h;
            worst = worst.max(rel_err((out(&a)? - out(&b)?) / (2.0 * h), g.d_b1[j], floor));
            let mut a = params.clone();
            let mut b = params.clone();
            a.w2[j] += h;
            b.w2[j] -= h;
            worst = worst.max(rel_err((out(&a)? - out(&b)?) / (2.0 * h), g.d_w2[j], floor));
            n += 2;
        }
    }
    Ok(GradcheckReport { n_checked: n, max_rel_err: worst, step: h })
}
