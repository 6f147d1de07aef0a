//! Three-layer binary-weight network: fixed Gaussian projection, quantized
//! hidden layer with ReLU, real output layer.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::error::{Error, Result};
use crate::num_core::Rng;
use crate::quant::{quantize, QuantBuffer, QuantMode};

/// Inputs must be unit-norm within this tolerance.
pub const NORM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d: usize,
    pub d1: usize,
    pub d2: usize,
}

impl Dims {
    pub fn new(d: usize, d1: usize, d2: usize) -> Result<Self> {
        if d == 0 || d1 == 0 || d2 == 0 {
            return Err(Error::InvalidArgument(format!("dims must be >= 1, got ({d}, {d1}, {d2})")));
        }
        Ok(Dims { d, d1, d2 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThetaInit {
    /// U[-1, 1], variance 1/3.
    Uniform,
    /// U[-s, s], variance s^2/3.
    ScaledUniform(f64),
}

impl ThetaInit {
    pub fn variance(&self) -> f64 {
        match *self {
            ThetaInit::Uniform => 1.0 / 3.0,
            ThetaInit::ScaledUniform(s) => s * s / 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// d x d1, never trained.
    pub w0: DMatrix<f64>,
    pub b0: DVector<f64>,
    /// d1 x d2.
    pub theta1: QuantBuffer,
    pub b1: DVector<f64>,
    pub w2: DVector<f64>,
    pub b2: f64,
    pub c: f64,
    pub beta: f64,
    pub dims: Dims,
}

/// One realization of the binary hidden weights.
#[derive(Clone, Debug)]
pub struct BinarySample {
    pub w1: DMatrix<f64>,
    pub parent: String,
}

/// Gradients with respect to the trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Grad {
    /// d1 x d2.
    pub d_theta1: DMatrix<f64>,
    pub d_b1: DVector<f64>,
    pub d_w2: DVector<f64>,
}

impl Grad {
    pub fn zeros(dims: Dims) -> Self {
        Grad {
            d_theta1: DMatrix::zeros(dims.d1, dims.d2),
            d_b1: DVector::zeros(dims.d2),
            d_w2: DVector::zeros(dims.d2),
        }
    }

    pub fn axpy(&mut self, a: f64, other: &Grad) {
        self.d_theta1 += &other.d_theta1 * a;
        self.d_b1.axpy(a, &other.d_b1, 1.0);
        self.d_w2.axpy(a, &other.d_w2, 1.0);
    }

    pub fn scale(&mut self, a: f64) {
        self.d_theta1 *= a;
        self.d_b1 *= a;
        self.d_w2 *= a;
    }
}

#[derive(Clone, Debug)]
pub struct Layers {
    pub x1: DVector<f64>,
    pub y1: DVector<f64>,
    pub x2: DVector<f64>,
}

pub fn init_params(
    dims: Dims,
    c: f64,
    beta: f64,
    theta_init: ThetaInit,
    rng: &mut Rng,
) -> Result<ModelParams> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidArgument(format!("c must be positive, got {c}")));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("beta must be nonnegative, got {beta}")));
    }
    let s = match theta_init {
        ThetaInit::Uniform => 1.0,
        ThetaInit::ScaledUniform(s) if s > 0.0 && s <= 1.0 => s,
        ThetaInit::ScaledUniform(s) => {
            return Err(Error::InvalidArgument(format!("theta scale must be in (0, 1], got {s}")))
        }
    };
    let Dims { d, d1, d2 } = dims;
    let w0 = DMatrix::from_fn(d, d1, |_, _| rng.normal());
    let theta = DMatrix::from_fn(d1, d2, |_, _| s * (2.0 * rng.uniform() - 1.0));
    let w2 = DVector::from_fn(d2, |_, _| rng.normal());
    Ok(ModelParams {
        w0,
        b0: DVector::zeros(d1),
        theta1: QuantBuffer::new(theta)?,
        b1: DVector::zeros(d2),
        w2,
        b2: 0.0,
        c,
        beta,
        dims,
    })
}

pub fn check_unit(x: &[f64]) -> Result<()> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (n - 1.0).abs() > NORM_TOL || !n.is_finite() {
        return Err(Error::Unnormalized(n));
    }
    Ok(())
}

impl ModelParams {
    /// SHA-256 over every field, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in [self.dims.d, self.dims.d1, self.dims.d2] {
            h.update((v as u64).to_le_bytes());
        }
        let blocks: [&[f64]; 5] = [
            self.w0.as_slice(),
            self.b0.as_slice(),
            self.theta1.theta().as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
        ];
        for b in blocks {
            for v in b {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        for v in [self.b2, self.c, self.beta] {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn sample(&self, rng: &mut Rng, mode: QuantMode) -> BinarySample {
        BinarySample {
            w1: quantize(&self.theta1, rng, mode),
            parent: self.fingerprint(),
        }
    }

    /// x1 = w0^T x / sqrt(d) + b0.
    pub fn project(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.dims.d {
            return Err(Error::Shape(format!("input has length {}, expected {}", x.len(), self.dims.d)));
        }
        check_unit(x)?;
        let xv = DVector::from_column_slice(x);
        Ok(self.w0.tr_mul(&xv) / (self.dims.d as f64).sqrt() + &self.b0)
    }

    /// Projects the columns of `x` (d x m) in one product.
    pub fn project_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.dims.d {
            return Err(Error::Shape(format!("inputs have {} rows, expected {}", x.nrows(), self.dims.d)));
        }
        for col in x.column_iter() {
            check_unit(col.as_slice())?;
        }
        let mut x1 = self.w0.tr_mul(x) / (self.dims.d as f64).sqrt();
        for mut col in x1.column_iter_mut() {
            col += &self.b0;
        }
        Ok(x1)
    }

    pub fn scale1(&self) -> f64 {
        (self.c / self.dims.d1 as f64).sqrt()
    }

    pub fn scale2(&self) -> f64 {
        1.0 / (self.dims.d2 as f64).sqrt()
    }

    /// Hidden pre-activation for hidden weights `w1` (binary or real).
    pub fn forward_hidden(&self, w1: &DMatrix<f64>, x1: DVector<f64>) -> (f64, Layers) {
        let y1 = w1.tr_mul(&x1) * self.scale1() + &self.b1 * self.beta;
        let x2 = y1.map(|v| v.max(0.0));
        let y = self.w2.dot(&x2) * self.scale2() + self.b2;
        (y, Layers { x1, y1, x2 })
    }

    pub fn forward_binary(&self, sample: &BinarySample, x: &[f64]) -> Result<(f64, Layers)> {
        if sample.w1.shape() != self.theta1.shape() {
            return Err(Error::Shape("binary sample does not match theta1".into()));
        }
        let x1 = self.project(x)?;
        Ok(self.forward_hidden(&sample.w1, x1))
    }

    /// Same pipeline with theta1 in place of the binary weights.
    pub fn forward_real(&self, x: &[f64]) -> Result<f64> {
        Ok(self.forward_real_layers(x)?.0)
    }

    pub fn forward_real_layers(&self, x: &[f64]) -> Result<(f64, Layers)> {
        let x1 = self.project(x)?;
        Ok(self.forward_hidden(self.theta1.theta(), x1))
    }

    /// Backpropagation through a forward pass that used hidden weights
    /// `w1`, treating those weights as real (straight-through for binary
    /// samples). The ReLU derivative at 0 is taken as 0.
    pub fn backward(&self, layers: &Layers, loss_grad: f64) -> Grad {
        let s2 = self.scale2();
        let d_w2 = &layers.x2 * (s2 * loss_grad);
        let gate = DVector::from_fn(self.dims.d2, |j, _| {
            if layers.y1[j] > 0.0 {
                self.w2[j] * s2 * loss_grad
            } else {
                0.0
            }
        });
        let d_b1 = &gate * self.beta;
        let d_theta1 = &layers.x1 * gate.transpose() * self.scale1();
        Grad { d_theta1, d_b1, d_w2 }
    }

    pub fn save(&self, path: &Path, seed: Option<u64>) -> Result<()> {
        let ck = Checkpoint::from_params(self, seed);
        let text = serde_json::to_string(&ck).map_err(|e| Error::Data(e.to_string()))?;
        crate::cli_io::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<(Self, Option<u64>)> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Data(e.to_string()))?;
        ck.into_params()
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized form of [`ModelParams`]. Matrices are column-major.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub dims: Dims,
    pub c: f64,
    pub beta: f64,
    pub seed: Option<u64>,
    pub w0: Vec<f64>,
    pub b0: Vec<f64>,
    pub theta1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl Checkpoint {
    pub fn from_params(p: &ModelParams, seed: Option<u64>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            dims: p.dims,
            c: p.c,
            beta: p.beta,
            seed,
            w0: p.w0.as_slice().to_vec(),
            b0: p.b0.as_slice().to_vec(),
            theta1: p.theta1.theta().as_slice().to_vec(),
            b1: p.b1.as_slice().to_vec(),
            w2: p.w2.as_slice().to_vec(),
            b2: p.b2,
        }
    }

    pub fn into_params(self) -> Result<(ModelParams, Option<u64>)> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {}", self.version)));
        }
        let Dims { d, d1, d2 } = Dims::new(self.dims.d, self.dims.d1, self.dims.d2)?;
        let lens = [
            (self.w0.len(), d * d1, "w0"),
            (self.b0.len(), d1, "b0"),
            (self.theta1.len(), d1 * d2, "theta1"),
            (self.b1.len(), d2, "b1"),
            (self.w2.len(), d2, "w2"),
        ];
        for (got, want, name) in lens {
            if got != want {
                return Err(Error::Data(format!("checkpoint field {name} has {got} entries, expected {want}")));
            }
        }
        let p = ModelParams {
            w0: DMatrix::from_vec(d, d1, self.w0),
            b0: DVector::from_vec(self.b0),
            theta1: QuantBuffer::new(DMatrix::from_vec(d1, d2, self.theta1))?,
            b1: DVector::from_vec(self.b1),
            w2: DVector::from_vec(self.w2),
            b2: self.b2,
            c: self.c,
            beta: self.beta,
            dims: self.dims,
        };
        Ok((p, self.seed))
    }
}

/// Finite-width residuals of the three "good initialization" conditions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GoodInitReport {
    /// max_{k,k'} |(1/d1) sum_i w0_ki w0_k'i - delta_kk'|
    pub cond1: f64,
    /// Largest (1/d1) sum_i |w0_ki w0_k'i w0_k''i|.
    pub third_moment: f64,
    /// Amount by which `third_moment` exceeds sqrt(8/pi), or 0.
    pub cond2: f64,
    /// max_{k,k',j} |(1/d1) sum_i w0_ki w0_k'i theta_ij^2 - Var[theta] delta_kk'|
    pub cond3: f64,
    /// Variance target used in condition 3.
    pub var_theta: f64,
    pub tol: f64,
    pub ok: bool,
}

/// Evaluates the good-initialization conditions. `var_theta` defaults to the
/// empirical second moment of theta1.
pub fn check_good_init(params: &ModelParams, var_theta: Option<f64>, tol: f64) -> GoodInitReport {
    let Dims { d, d1, d2 } = params.dims;
    let w0 = &params.w0;
    let n = d1 as f64;
    let var_theta = var_theta.unwrap_or_else(|| params.theta1.second_moment());
    let gram = w0 * w0.transpose() / n;
    let mut cond1: f64 = 0.0;
    for k in 0..d {
        for kp in 0..d {
            let delta = if k == kp { 1.0 } else { 0.0 };
            cond1 = cond1.max((gram[(k, kp)] - delta).abs());
        }
    }
    let mut third: f64 = 0.0;
    for k in 0..d {
        for kp in k..d {
            for kpp in kp..d {
                let s: f64 = (0..d1)
                    .map(|i| (w0[(k, i)] * w0[(kp, i)] * w0[(kpp, i)]).abs())
                    .sum();
                third = third.max(s / n);
            }
        }
    }
    let bound = (8.0 / std::f64::consts::PI).sqrt();
    let cond2 = (third - bound).max(0.0);
    let theta = params.theta1.theta();
    let mut cond3: f64 = 0.0;
    for j in 0..d2 {
        let sq = theta.column(j).map(|t| t * t);
        let mut scaled = w0.clone();
        for (i, mut col) in scaled.column_iter_mut().enumerate() {
            col *= sq[i];
        }
        let g = &scaled * w0.transpose() / n;
        for k in 0..d {
            for kp in 0..d {
                let delta = if k == kp { var_theta } else { 0.0 };
                cond3 = cond3.max((g[(k, kp)] - delta).abs());
            }
        }
    }
    GoodInitReport {
        cond1,
        third_moment: third,
        cond2,
        cond3,
        var_theta,
        tol,
        ok: cond1 <= tol && cond2 <= tol && cond3 <= tol,
    }
}
