//! Neural tangent kernels of the quasi network: the finite-width Gram
//! matrix, its infinite-width limit, the ReLU baseline, and kernel ridge
//! regression.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::network::{check_unit, ModelParams};
use crate::num_core::{make_quadrature, QuadKind, QuadratureRule, Rng};
use crate::quasi::{psi, psi_grad};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    Empirical { width: usize },
    AnalyticBwnn { c: f64, d: usize, var_theta: f64, beta: f64 },
    AnalyticRelu { c: f64, d: usize, beta: f64 },
    Rgauss { d: usize, xi: f64 },
    Laplace { bandwidth: f64 },
    Gaussian { bandwidth: f64 },
}

#[derive(Clone, Debug)]
pub struct KernelMatrix {
    pub gram: DMatrix<f64>,
    pub provenance: Provenance,
    pub probe_ids: Vec<usize>,
}

pub const SYMMETRY_TOL: f64 = 1e-10;
pub const PSD_TOL: f64 = 1e-8;

impl KernelMatrix {
    pub fn new(gram: DMatrix<f64>, provenance: Provenance) -> Self {
        let probe_ids = (0..gram.nrows()).collect();
        KernelMatrix { gram, provenance, probe_ids }
    }

    pub fn max_asymmetry(&self) -> f64 {
        let g = &self.gram;
        let mut m: f64 = 0.0;
        for i in 0..g.nrows() {
            for j in 0..i {
                m = m.max((g[(i, j)] - g[(j, i)]).abs());
            }
        }
        m
    }

    /// (min, max) eigenvalue of the symmetrized Gram matrix.
    pub fn eigen_range(&self) -> (f64, f64) {
        let sym = (&self.gram + self.gram.transpose()) * 0.5;
        let ev = sym.symmetric_eigenvalues();
        (ev.min(), ev.max())
    }

    pub fn is_psd(&self) -> bool {
        let (lo, hi) = self.eigen_range();
        lo >= -PSD_TOL * hi.abs().max(f64::MIN_POSITIVE)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gram.nrows() != self.gram.ncols() {
            return Err(Error::Shape("Gram matrix is not square".into()));
        }
        let asym = self.max_asymmetry();
        if asym > SYMMETRY_TOL * self.gram.amax().max(1.0) {
            return Err(Error::Domain(format!("Gram matrix asymmetric by {asym:e}")));
        }
        if !self.is_psd() {
            let (lo, hi) = self.eigen_range();
            return Err(Error::Domain(format!("Gram matrix not PSD: eigenvalues in [{lo:e}, {hi:e}]")));
        }
        Ok(())
    }

    /// ||self - other||_F / ||other||_F.
    pub fn rel_frobenius(&self, other: &KernelMatrix) -> f64 {
        (&self.gram - &other.gram).norm() / other.gram.norm()
    }

    /// Row-major CSV with a commented provenance header line.
    pub fn to_csv(&self) -> Result<String> {
        let header = serde_json::to_string(&self.provenance).map_err(|e| Error::Data(e.to_string()))?;
        let mut w = csv::Writer::from_writer(Vec::new());
        let names: Vec<String> = self.probe_ids.iter().map(|i| format!("p{i}")).collect();
        w.write_record(&names).map_err(|e| Error::Data(e.to_string()))?;
        for i in 0..self.gram.nrows() {
            let row: Vec<String> = (0..self.gram.ncols()).map(|j| format!("{:e}", self.gram[(i, j)])).collect();
            w.write_record(&row).map_err(|e| Error::Data(e.to_string()))?;
        }
        let body = String::from_utf8(w.into_inner().map_err(|e| Error::Data(e.to_string()))?)
            .map_err(|e| Error::Data(e.to_string()))?;
        Ok(format!("# {header}\n{body}"))
    }
}

/// Columns of a d x m matrix as unit-checked probes.
fn check_probes(probes: &DMatrix<f64>) -> Result<()> {
    for col in probes.column_iter() {
        check_unit(col.as_slice())?;
    }
    Ok(())
}

/// Finite-width NTK of the quasi network over the columns of `probes`,
/// with every hidden neuron using variance `varsigma_sq`.
///
/// The gradient inner products factor as
/// (1/d2) [ ((c/d1) <x1, x1'> + beta^2) sum_j w2_j^2 psi'_j psi'_j' + sum_j psi_j psi_j' ].
pub fn empirical_ntk(params: &ModelParams, probes: &DMatrix<f64>, varsigma_sq: f64) -> Result<KernelMatrix> {
    if !(varsigma_sq >= 0.0) {
        return Err(Error::Domain(format!("varsigma^2 = {varsigma_sq}")));
    }
    let x1 = params.project_batch(probes)?;
    let s = varsigma_sq.sqrt();
    let bias = &params.b1 * params.beta;
    let mut nu = params.theta1.theta().tr_mul(&x1) * params.scale1();
    for mut col in nu.column_iter_mut() {
        col += &bias;
    }
    let a = DMatrix::from_fn(nu.nrows(), nu.ncols(), |j, k| params.w2[j] * psi_grad(nu[(j, k)], s));
    let m = nu.map(|v| psi(v, s));
    let g = x1.tr_mul(&x1) * (params.c / params.dims.d1 as f64);
    let aa = a.tr_mul(&a);
    let mm = m.tr_mul(&m);
    let b2 = params.beta * params.beta;
    let inv = 1.0 / params.dims.d2 as f64;
    let gram = DMatrix::from_fn(g.nrows(), g.ncols(), |i, j| inv * ((g[(i, j)] + b2) * aa[(i, j)] + mm[(i, j)]));
    Ok(KernelMatrix::new(gram, Provenance::Empirical { width: params.dims.d2 }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum NtkMethod {
    /// Tensor Gauss-Hermite rule of the given order per axis.
    Quadrature { order: usize },
    /// Arc-cosine closed form of the smoothed-ReLU expectations.
    ClosedForm,
    /// Plain Monte-Carlo over the bivariate normal.
    MonteCarlo { samples: usize, seed: u64 },
}

impl Default for NtkMethod {
    fn default() -> Self {
        NtkMethod::Quadrature { order: 64 }
    }
}

/// The two Gaussian expectations (Sigma0, Sigma1) of the limit kernel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SigmaPair {
    pub sigma0: f64,
    pub sigma1: f64,
}

/// Infinite-width BWNN NTK as a function of the inner product.
#[derive(Clone, Debug)]
pub struct BwnnNtk {
    pub c: f64,
    pub d: usize,
    pub var_theta: f64,
    pub beta: f64,
    method: NtkMethod,
    rule: Option<QuadratureRule>,
}

impl BwnnNtk {
    pub fn new(c: f64, d: usize, var_theta: f64, beta: f64, method: NtkMethod) -> Result<Self> {
        if !(c > 0.0) || d == 0 || !(0.0..=1.0).contains(&var_theta) || !(beta >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "invalid NTK parameters c={c}, d={d}, var_theta={var_theta}, beta={beta}"
            )));
        }
        let rule = match method {
            NtkMethod::Quadrature { order } => Some(make_quadrature(QuadKind::GaussHermite, order)?),
            _ => None,
        };
        Ok(BwnnNtk { c, d, var_theta, beta, method, rule })
    }

    /// Variance of the pre-activation means and the limit smoothing variance.
    fn scales(&self) -> (f64, f64) {
        let cd = self.c / self.d as f64;
        (cd * self.var_theta, cd * (1.0 - self.var_theta))
    }

    pub fn sigmas(&self, t: f64) -> Result<SigmaPair> {
        check_t(t)?;
        let (v, vs) = self.scales();
        let sd = v.sqrt();
        let s = vs.sqrt();
        match self.method {
            NtkMethod::ClosedForm => Ok(arccos_pair(self.var_theta * t, self.c / self.d as f64)),
            NtkMethod::Quadrature { .. } => {
                let rule = self.rule.as_ref().expect("quadrature rule");
                let r = (1.0 - t * t).max(0.0).sqrt();
                let mut s0 = 0.0;
                let mut s1 = 0.0;
                for (&xa, &wa) in rule.nodes.iter().zip(&rule.weights) {
                    let za = std::f64::consts::SQRT_2 * xa;
                    let mu = sd * za;
                    let (pa, da) = (psi(mu, s), psi_grad(mu, s));
                    for (&xb, &wb) in rule.nodes.iter().zip(&rule.weights) {
                        let zb = std::f64::consts::SQRT_2 * xb;
                        let mu2 = sd * (t * za + r * zb);
                        let w = wa * wb;
                        s0 += w * da * psi_grad(mu2, s);
                        s1 += w * pa * psi(mu2, s);
                    }
                }
                Ok(SigmaPair { sigma0: s0 / PI, sigma1: s1 / PI })
            }
            NtkMethod::MonteCarlo { samples, seed } => {
                let mut rng = Rng::new(seed);
                let r = (1.0 - t * t).max(0.0).sqrt();
                let (mut s0, mut s1) = (0.0, 0.0);
                for _ in 0..samples {
                    let za = rng.normal();
                    let zb = rng.normal();
                    let m1 = sd * za;
                    let m2 = sd * (t * za + r * zb);
                    s0 += psi_grad(m1, s) * psi_grad(m2, s);
                    s1 += psi(m1, s) * psi(m2, s);
                }
                let n = samples as f64;
                Ok(SigmaPair { sigma0: s0 / n, sigma1: s1 / n })
            }
        }
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        let sp = self.sigmas(t)?;
        Ok((self.c * t / self.d as f64 + self.beta * self.beta) * sp.sigma0 + sp.sigma1)
    }

    pub fn gram(&self, probes: &DMatrix<f64>) -> Result<KernelMatrix> {
        check_probes(probes)?;
        let g = probes.tr_mul(probes);
        let m = g.nrows();
        let mut gram = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..=i {
                let v = self.eval(g[(i, j)].clamp(-1.0, 1.0))?;
                gram[(i, j)] = v;
                gram[(j, i)] = v;
            }
        }
        Ok(KernelMatrix::new(
            gram,
            Provenance::AnalyticBwnn { c: self.c, d: self.d, var_theta: self.var_theta, beta: self.beta },
        ))
    }
}

fn check_t(t: f64) -> Result<()> {
    if !(t.abs() <= 1.0) {
        return Err(Error::Domain(format!("inner product t = {t} outside [-1, 1]")));
    }
    Ok(())
}

/// Orthant probability and ReLU product moment of a standard bivariate
/// normal with correlation `rho`, the latter scaled by `scale`.
fn arccos_pair(rho: f64, scale: f64) -> SigmaPair {
    let rho = rho.clamp(-1.0, 1.0);
    let a = PI - rho.acos();
    SigmaPair {
        sigma0: a / (2.0 * PI),
        sigma1: scale * ((1.0 - rho * rho).max(0.0).sqrt() + rho * a) / (2.0 * PI),
    }
}

/// Infinite-width BWNN NTK at inner product `t` (Gauss-Hermite order 64).
pub fn analytic_ntk_bwnn(t: f64, c: f64, d: usize, var_theta: f64, beta: f64) -> Result<f64> {
    BwnnNtk::new(c, d, var_theta, beta, NtkMethod::default())?.eval(t)
}

/// ReLU arc-cosine expectations at inner product `t`.
pub fn relu_sigmas(t: f64) -> Result<SigmaPair> {
    check_t(t)?;
    Ok(arccos_pair(t, 1.0))
}

/// Two-layer ReLU NTK with the same scale constants as the quasi network.
pub fn analytic_ntk_relu(t: f64, c: f64, d: usize, beta: f64) -> Result<f64> {
    let sp = relu_sigmas(t)?;
    Ok((c * t / d as f64 + beta * beta) * sp.sigma0 + sp.sigma1)
}

pub fn relu_gram(probes: &DMatrix<f64>, c: f64, d: usize, beta: f64) -> Result<KernelMatrix> {
    check_probes(probes)?;
    let g = probes.tr_mul(probes);
    let mut gram = DMatrix::zeros(g.nrows(), g.ncols());
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            gram[(i, j)] = analytic_ntk_relu(g[(i, j)].clamp(-1.0, 1.0), c, d, beta)?;
        }
    }
    Ok(KernelMatrix::new(gram, Provenance::AnalyticRelu { c, d, beta }))
}

/// Dual coefficients (K + lambda I)^{-1} Y for one or more target columns.
pub fn kernel_ridge_fit(k: &KernelMatrix, targets: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    let m = k.gram.nrows();
    if targets.nrows() != m {
        return Err(Error::Shape(format!("{} targets for a {m}x{m} kernel", targets.nrows())));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("ridge must be nonnegative, got {lambda}")));
    }
    let mut a = (&k.gram + k.gram.transpose()) * 0.5;
    for i in 0..m {
        a[(i, i)] += lambda;
    }
    match a.clone().cholesky() {
        Some(ch) => Ok(ch.solve(targets)),
        None => a
            .lu()
            .solve(targets)
            .filter(|x| x.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::Singular(format!("K + {lambda} I is singular"))),
    }
}

pub fn kernel_ridge_fit_vec(k: &KernelMatrix, targets: &[f64], lambda: f64) -> Result<DVector<f64>> {
    let y = DMatrix::from_column_slice(targets.len(), 1, targets);
    Ok(kernel_ridge_fit(k, &y, lambda)?.column(0).into_owned())
}

/// Predictions `cross * coeffs`; `cross` has one row per query point.
pub fn kernel_ridge_predict(coeffs: &DMatrix<f64>, cross: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if cross.ncols() != coeffs.nrows() {
        return Err(Error::Shape(format!(
            "cross kernel has {} columns, coefficients {} rows",
            cross.ncols(),
            coeffs.nrows()
        )));
    }
    Ok(cross * coeffs)
}

/// Gram matrix of a zonal kernel k(<x, x'>) between columns of `a` and `b`.
pub fn zonal_cross<F: Fn(f64) -> f64>(a: &DMatrix<f64>, b: &DMatrix<f64>, f: F) -> DMatrix<f64> {
    let g = a.tr_mul(b);
    g.map(|t| f(t.clamp(-1.0, 1.0)))
}

/// Orthant probability helper exposed for tests: P(U > 0, U' > 0) for a
/// standard bivariate normal with correlation rho.
pub fn orthant_probability(rho: f64) -> f64 {
    arccos_pair(rho, 1.0).sigma0
}

/// Used by the spectrum module to evaluate the closed form without
/// constructing a kernel object.
pub(crate) fn bwnn_closed_form(t: f64, c: f64, d: usize, var_theta: f64, beta: f64) -> f64 {
    let sp = arccos_pair(var_theta * t, c / d as f64);
    (c * t / d as f64 + beta * beta) * sp.sigma0 + sp.sigma1
}
