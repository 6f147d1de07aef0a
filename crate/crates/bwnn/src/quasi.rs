//! The quasi network: Gaussian moment propagation through the quantized
//! layer and the smoothed ReLU it induces.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Grad, ModelParams};
use crate::num_core::{gauss_cdf, gauss_pdf, Rng};
use crate::quant::{quantize, QuantMode};

pub type QuasiGrad = Grad;

/// Limit variance (c/d)(1 - Var[theta]) of the hidden pre-activations.
pub fn tilde_varsigma_sq(c: f64, d: usize, var_theta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&var_theta) {
        return Err(Error::Domain(format!("Var[theta] = {var_theta} outside [0, 1]")));
    }
    if d == 0 || !(c > 0.0) {
        return Err(Error::InvalidArgument(format!("need d >= 1 and c > 0, got d={d}, c={c}")));
    }
    Ok(c / d as f64 * (1.0 - var_theta))
}

fn check_varsigma(varsigma: f64) -> Result<()> {
    if !(varsigma > 0.0) || !varsigma.is_finite() {
        return Err(Error::Domain(format!("varsigma must be positive, got {varsigma}")));
    }
    Ok(())
}

/// psi(nu) = s phi(nu/s) + nu Phi(nu/s), falling back to ReLU at s = 0.
#[inline]
pub(crate) fn psi(nu: f64, s: f64) -> f64 {
    if s > 0.0 {
        let z = nu / s;
        s * gauss_pdf(z) + nu * gauss_cdf(z)
    } else {
        nu.max(0.0)
    }
}

/// psi'(nu) = Phi(nu/s), falling back to the ReLU step at s = 0.
#[inline]
pub(crate) fn psi_grad(nu: f64, s: f64) -> f64 {
    if s > 0.0 {
        gauss_cdf(nu / s)
    } else if nu > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Smoothed ReLU: E[max(Y, 0)] for Y ~ N(nu, varsigma^2).
pub fn quasi_act(nu: f64, varsigma: f64) -> Result<f64> {
    check_varsigma(varsigma)?;
    Ok(psi(nu, varsigma))
}

pub fn quasi_act_grad(nu: f64, varsigma: f64) -> Result<f64> {
    check_varsigma(varsigma)?;
    Ok(psi_grad(nu, varsigma))
}

#[inline]
pub(crate) fn moments(nu: f64, s: f64) -> (f64, f64) {
    if s > 0.0 {
        let z = nu / s;
        let g = gauss_pdf(z);
        let p = gauss_cdf(z);
        let mean = s * g + nu * p;
        let second = (s * s + nu * nu) * p + nu * s * g;
        (mean, (second - mean * mean).max(0.0))
    } else {
        (nu.max(0.0), 0.0)
    }
}

/// Mean and variance of max(Y, 0) for Y ~ N(nu, varsigma^2).
pub fn relu_moments(nu: f64, varsigma: f64) -> Result<(f64, f64)> {
    check_varsigma(varsigma)?;
    Ok(moments(nu, varsigma))
}

/// How the hidden pre-activation variance is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMode {
    /// Per-neuron (c/d1) sum_i (1 - theta_ij^2) x1_i^2.
    Exact,
    /// A single limit variance for every neuron.
    Limit { varsigma_sq: f64 },
}

impl VarianceMode {
    pub fn limit(c: f64, d: usize, var_theta: f64) -> Result<Self> {
        Ok(VarianceMode::Limit { varsigma_sq: tilde_varsigma_sq(c, d, var_theta)? })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentState {
    pub nu1: Vec<f64>,
    pub varsigma1_sq: Vec<f64>,
    pub mu2: Vec<f64>,
    pub sigma2_sq: Vec<f64>,
    pub ybar: f64,
}

/// Conditional pre-activation means, nu1 = sqrt(c/d1) theta^T x1 + beta b1.
pub fn hidden_means(params: &ModelParams, x1: &DVector<f64>) -> DVector<f64> {
    params.theta1.theta().tr_mul(x1) * params.scale1() + &params.b1 * params.beta
}

/// Exact per-neuron variances (c/d1) sum_i (1 - theta_ij^2) x1_i^2.
pub fn exact_variances(params: &ModelParams, x1: &DVector<f64>) -> DVector<f64> {
    let theta = params.theta1.theta();
    let x1sq = x1.map(|v| v * v);
    let norm = x1sq.sum();
    let c = params.c / params.dims.d1 as f64;
    DVector::from_fn(params.dims.d2, |j, _| {
        let s: f64 = theta.column(j).iter().zip(x1sq.iter()).map(|(t, x)| t * t * x).sum();
        (c * (norm - s)).max(0.0)
    })
}

fn variances(params: &ModelParams, x1: &DVector<f64>, mode: VarianceMode) -> Result<DVector<f64>> {
    match mode {
        VarianceMode::Exact => Ok(exact_variances(params, x1)),
        VarianceMode::Limit { varsigma_sq } => {
            if !(varsigma_sq >= 0.0) {
                return Err(Error::Domain(format!("limit variance {varsigma_sq} is negative")));
            }
            Ok(DVector::from_element(params.dims.d2, varsigma_sq))
        }
    }
}

pub fn propagate_moments(params: &ModelParams, x: &[f64], mode: VarianceMode) -> Result<MomentState> {
    let x1 = params.project(x)?;
    propagate_from_hidden(params, &x1, mode)
}

pub fn propagate_from_hidden(
    params: &ModelParams,
    x1: &DVector<f64>,
    mode: VarianceMode,
) -> Result<MomentState> {
    let nu = hidden_means(params, x1);
    let var = variances(params, x1, mode)?;
    let d2 = params.dims.d2;
    let mut mu2 = Vec::with_capacity(d2);
    let mut sigma2 = Vec::with_capacity(d2);
    for j in 0..d2 {
        let (m, v) = moments(nu[j], var[j].sqrt());
        mu2.push(m);
        sigma2.push(v);
    }
    let ybar = params.w2.iter().zip(&mu2).map(|(w, m)| w * m).sum::<f64>() * params.scale2() + params.b2;
    Ok(MomentState {
        nu1: nu.as_slice().to_vec(),
        varsigma1_sq: var.as_slice().to_vec(),
        mu2,
        sigma2_sq: sigma2,
        ybar,
    })
}

/// Gradient of ybar scaled by `loss_grad`. Uses whatever variances `state`
/// carries, so it serves both variance modes.
pub fn quasi_backward(
    params: &ModelParams,
    x: &[f64],
    state: &MomentState,
    loss_grad: f64,
) -> Result<QuasiGrad> {
    let x1 = params.project(x)?;
    quasi_backward_hidden(params, &x1, state, loss_grad)
}

pub fn quasi_backward_hidden(
    params: &ModelParams,
    x1: &DVector<f64>,
    state: &MomentState,
    loss_grad: f64,
) -> Result<QuasiGrad> {
    let d2 = params.dims.d2;
    if state.nu1.len() != d2 || state.mu2.len() != d2 || state.varsigma1_sq.len() != d2 {
        return Err(Error::Shape(format!("moment state width does not match d2 = {d2}")));
    }
    if x1.len() != params.dims.d1 {
        return Err(Error::Shape(format!("hidden input has length {}, expected {}", x1.len(), params.dims.d1)));
    }
    let s2 = params.scale2() * loss_grad;
    let d_w2 = DVector::from_fn(d2, |j, _| state.mu2[j] * s2);
    let gate = DVector::from_fn(d2, |j, _| {
        params.w2[j] * psi_grad(state.nu1[j], state.varsigma1_sq[j].sqrt()) * s2
    });
    let d_b1 = &gate * params.beta;
    let d_theta1 = x1 * gate.transpose() * params.scale1();
    Ok(Grad { d_theta1, d_b1, d_w2 })
}

/// Monte-Carlo statistics of the sampled binary network at one input.
#[derive(Clone, Debug)]
pub struct McStats {
    pub mean: f64,
    pub var: f64,
    /// n x d2 matrix of sampled hidden pre-activations.
    pub y1: DMatrix<f64>,
}

pub fn mc_forward_stats(params: &ModelParams, x: &[f64], n: usize, rng: &mut Rng) -> Result<McStats> {
    if n < 100 {
        return Err(Error::InvalidArgument(format!("need at least 100 samples, got {n}")));
    }
    let x1 = params.project(x)?;
    let mut ys = Vec::with_capacity(n);
    let mut y1 = DMatrix::zeros(n, params.dims.d2);
    for s in 0..n {
        let w1 = quantize(&params.theta1, rng, QuantMode::Stochastic);
        let (y, layers) = params.forward_hidden(&w1, x1.clone());
        ys.push(y);
        y1.row_mut(s).copy_from(&layers.y1.transpose());
    }
    let (mean, var) = mean_var(&ys);
    Ok(McStats { mean, var, y1 })
}

/// Sampled output means and variances at many inputs sharing each binary
/// draw. `x` is d x m; returns per-column (mean, var).
pub fn mc_forward_batch(
    params: &ModelParams,
    x: &DMatrix<f64>,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<(f64, f64)>> {
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 samples".into()));
    }
    let x1 = params.project_batch(x)?;
    let m = x.ncols();
    let mut sum = vec![0.0; m];
    let mut sumsq = vec![0.0; m];
    let bias = &params.b1 * params.beta;
    for _ in 0..n {
        let w1 = quantize(&params.theta1, rng, QuantMode::Stochastic);
        let mut pre = w1.tr_mul(&x1) * params.scale1();
        for mut col in pre.column_iter_mut() {
            col += &bias;
        }
        for k in 0..m {
            let y = pre
                .column(k)
                .iter()
                .zip(params.w2.iter())
                .map(|(v, w)| w * v.max(0.0))
                .sum::<f64>()
                * params.scale2()
                + params.b2;
            sum[k] += y;
            sumsq[k] += y * y;
        }
    }
    let nf = n as f64;
    Ok((0..m)
        .map(|k| {
            let mean = sum[k] / nf;
            let var = ((sumsq[k] - nf * mean * mean) / (nf - 1.0)).max(0.0);
            (mean, var)
        })
        .collect())
}

pub(crate) fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}
