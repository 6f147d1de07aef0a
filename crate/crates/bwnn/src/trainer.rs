//! BinaryConnect, quasi-network and real-weight training loops with
//! lazy-training diagnostics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{check_unit, Grad, ModelParams};
use crate::ntk::empirical_ntk;
use crate::num_core::Rng;
use crate::quant::{quantize, QuantMode};
use crate::quasi::{exact_variances, psi, psi_grad};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Sample binary weights each step, straight-through gradient into theta.
    Binaryconnect,
    /// Exact gradient of the quasi network output.
    Quasi,
    /// Plain backprop with theta used as real weights.
    Real,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Steps between drift checkpoints; 0 records only the first and last.
    pub record_drift_every: usize,
    pub optimizer: Optimizer,
    /// Hidden variance used by the quasi network.
    pub varsigma_sq: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(self.varsigma_sq >= 0.0) {
            return Err(Error::InvalidArgument(format!("varsigma_sq must be >= 0, got {}", self.varsigma_sq)));
        }
        Ok(())
    }
}

/// Regression data: inputs as columns of a d x m matrix.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
}

impl TrainData {
    pub fn new(x: DMatrix<f64>, y: Vec<f64>) -> Result<Self> {
        if x.ncols() != y.len() {
            return Err(Error::Shape(format!("{} inputs but {} targets", x.ncols(), y.len())));
        }
        for col in x.column_iter() {
            check_unit(col.as_slice())?;
        }
        Ok(TrainData { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DriftLog {
    pub step: Vec<usize>,
    pub loss: Vec<f64>,
    pub w2: Vec<f64>,
    pub b1: Vec<f64>,
    pub theta1: Vec<f64>,
    /// max_j |varsigma_1j^2(t) - varsigma~^2| over the first few inputs.
    pub varsigma: Vec<f64>,
    /// max_j |varsigma_1j^2(t) - varsigma_1j^2(0)| over the same inputs.
    pub varsigma_shift: Vec<f64>,
}

impl DriftLog {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Data(e.to_string());
        w.write_record(["step", "loss", "w2_drift", "b1_drift", "theta1_drift", "varsigma_drift", "varsigma_shift"]).map_err(err)?;
        for i in 0..self.step.len() {
            w.write_record([
                self.step[i].to_string(),
                format!("{:e}", self.loss[i]),
                format!("{:e}", self.w2[i]),
                format!("{:e}", self.b1[i]),
                format!("{:e}", self.theta1[i]),
                format!("{:e}", self.varsigma[i]),
                format!("{:e}", self.varsigma_shift[i]),
            ])
            .map_err(err)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Data(e.to_string()))?).map_err(|e| Error::Data(e.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub drift: DriftLog,
    /// Mini-batch loss at every step.
    pub losses: Vec<f64>,
}

pub const DIVERGENCE_LOSS: f64 = 1e6;
const DRIFT_PROBES: usize = 16;

/// Hidden pre-activations of the columns `x1`, with `w1` replacing theta
/// when given.
fn pre_activations(params: &ModelParams, w1: Option<&DMatrix<f64>>, x1: &DMatrix<f64>) -> DMatrix<f64> {
    let weights = w1.unwrap_or(params.theta1.theta());
    let mut pre = weights.tr_mul(x1) * params.scale1();
    let bias = &params.b1 * params.beta;
    for mut col in pre.column_iter_mut() {
        col += &bias;
    }
    pre
}

fn activate(pre: &DMatrix<f64>, mode: TrainMode, varsigma_sq: f64) -> DMatrix<f64> {
    let s = varsigma_sq.sqrt();
    match mode {
        TrainMode::Quasi => pre.map(|v| psi(v, s)),
        _ => pre.map(|v| v.max(0.0)),
    }
}

/// Mean batch loss 0.5 (y - z)^2 and its gradient.
fn batch_grad(
    params: &ModelParams,
    mode: TrainMode,
    w1: Option<&DMatrix<f64>>,
    x1: &DMatrix<f64>,
    z: &[f64],
    varsigma_sq: f64,
) -> (f64, Grad) {
    let b = x1.ncols();
    let s2 = params.scale2();
    let pre = pre_activations(params, w1, x1);
    let act = activate(&pre, mode, varsigma_sq);
    let s = varsigma_sq.sqrt();
    let mut gate = match mode {
        TrainMode::Quasi => pre.map(|v| psi_grad(v, s)),
        _ => pre.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
    };
    let out = act.tr_mul(&params.w2) * s2;
    let mut loss = 0.0;
    let lg = DVector::from_fn(b, |k, _| {
        let r = out[k] + params.b2 - z[k];
        loss += 0.5 * r * r;
        r / b as f64
    });
    let d_w2 = &act * &lg * s2;
    for (k, mut col) in gate.column_iter_mut().enumerate() {
        col.component_mul_assign(&params.w2);
        col *= lg[k] * s2;
    }
    let d_b1 = gate.column_sum() * params.beta;
    let d_theta1 = x1 * gate.transpose() * params.scale1();
    (loss / b as f64, Grad { d_theta1, d_b1, d_w2 })
}

struct Adam {
    m: Grad,
    v: Grad,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(p: &ModelParams) -> Self {
        Adam { m: Grad::zeros(p.dims), v: Grad::zeros(p.dims), t: 0 }
    }

    fn direction(&mut self, g: &Grad) -> Grad {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        fn upd(m: &mut [f64], v: &mut [f64], g: &[f64], out: &mut [f64], c1: f64, c2: f64) {
            for i in 0..g.len() {
                m[i] = Adam::B1 * m[i] + (1.0 - Adam::B1) * g[i];
                v[i] = Adam::B2 * v[i] + (1.0 - Adam::B2) * g[i] * g[i];
                out[i] = (m[i] / c1) / ((v[i] / c2).sqrt() + Adam::EPS);
            }
        }
        let mut out = g.clone();
        upd(self.m.d_theta1.as_mut_slice(), self.v.d_theta1.as_mut_slice(), g.d_theta1.as_slice(), out.d_theta1.as_mut_slice(), c1, c2);
        upd(self.m.d_b1.as_mut_slice(), self.v.d_b1.as_mut_slice(), g.d_b1.as_slice(), out.d_b1.as_mut_slice(), c1, c2);
        upd(self.m.d_w2.as_mut_slice(), self.v.d_w2.as_mut_slice(), g.d_w2.as_slice(), out.d_w2.as_mut_slice(), c1, c2);
        out
    }
}

fn apply(params: &mut ModelParams, dir: &Grad, lr: f64, wd: f64) {
    let theta = params.theta1.theta_mut();
    theta.zip_apply(&dir.d_theta1, |p, g| *p -= lr * (g + wd * *p));
    params.theta1.clip();
    params.b1.zip_apply(&dir.d_b1, |p, g| *p -= lr * (g + wd * *p));
    params.w2.zip_apply(&dir.d_w2, |p, g| *p -= lr * (g + wd * *p));
}

fn record(
    log: &mut DriftLog,
    step: usize,
    loss: f64,
    p0: &ModelParams,
    p: &ModelParams,
    probes: &DMatrix<f64>,
    varsigma_sq: f64,
) {
    log.step.push(step);
    log.loss.push(loss);
    log.w2.push((&p.w2 - &p0.w2).norm());
    log.b1.push((&p.b1 - &p0.b1).norm());
    log.theta1.push((p.theta1.theta() - p0.theta1.theta()).norm());
    let (mut worst, mut shift) = (0.0f64, 0.0f64);
    for col in probes.column_iter() {
        let x1 = col.into_owned();
        let v = exact_variances(p, &x1);
        let v0 = exact_variances(p0, &x1);
        for (a, b) in v.iter().zip(v0.iter()) {
            worst = worst.max((a - varsigma_sq).abs());
            shift = shift.max((a - b).abs());
        }
    }
    log.varsigma.push(worst);
    log.varsigma_shift.push(shift);
}

/// Trains a copy of `params`. Mini-batches are drawn by reshuffling every
/// epoch; BinaryConnect draws one binary sample per step.
pub fn train(params: &ModelParams, data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut rng = Rng::with_stream(cfg.seed, 0x7261_696e);
    let x1_all = params.project_batch(&data.x)?;
    let probes = x1_all.columns(0, data.len().min(DRIFT_PROBES)).into_owned();
    let p0 = params.clone();
    let mut p = params.clone();
    let mut log = DriftLog::default();
    let mut losses = Vec::new();
    let mut adam = match cfg.optimizer {
        Optimizer::Adam => Some(Adam::new(&p)),
        Optimizer::Sgd => None,
    };
    let m = data.len();
    let bs = cfg.batch_size.min(m);
    let mut order: Vec<usize> = (0..m).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        if bs < m {
            for i in (1..m).rev() {
                let j = rng.below(i + 1);
                order.swap(i, j);
            }
        }
        for chunk in order.chunks(bs) {
            let x1 = DMatrix::from_fn(x1_all.nrows(), chunk.len(), |r, c| x1_all[(r, chunk[c])]);
            let z: Vec<f64> = chunk.iter().map(|&i| data.y[i]).collect();
            let w1 = match cfg.mode {
                TrainMode::Binaryconnect => Some(quantize(&p.theta1, &mut rng, QuantMode::Stochastic)),
                _ => None,
            };
            let (loss, g) = batch_grad(&p, cfg.mode, w1.as_ref(), &x1, &z, cfg.varsigma_sq);
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(Error::Diverged { step, loss });
            }
            if step == 0 {
                record(&mut log, 0, loss, &p0, &p, &probes, cfg.varsigma_sq);
            }
            losses.push(loss);
            let dir = match adam.as_mut() {
                Some(a) => a.direction(&g),
                None => g,
            };
            apply(&mut p, &dir, cfg.lr, cfg.weight_decay);
            step += 1;
            if cfg.record_drift_every > 0 && step % cfg.record_drift_every == 0 {
                record(&mut log, step, loss, &p0, &p, &probes, cfg.varsigma_sq);
            }
        }
    }
    if log.step.last() != Some(&step) {
        let last = losses.last().copied().unwrap_or(0.0);
        record(&mut log, step, last, &p0, &p, &probes, cfg.varsigma_sq);
    }
    Ok(TrainOutcome { params: p, drift: log, losses })
}

/// Network outputs for the columns of `x`: through the quasi network
/// (`Quasi`), the real network (`Real`), or averaged over `samples` binary
/// draws (`Binaryconnect`).
pub fn predict(
    params: &ModelParams,
    x: &DMatrix<f64>,
    mode: TrainMode,
    varsigma_sq: f64,
    rng: &mut Rng,
    samples: usize,
) -> Result<Vec<f64>> {
    let x1 = params.project_batch(x)?;
    let eval = |w1: Option<&DMatrix<f64>>| -> Vec<f64> {
        let act = activate(&pre_activations(params, w1, &x1), mode, varsigma_sq);
        (act.tr_mul(&params.w2) * params.scale2()).iter().map(|v| v + params.b2).collect()
    };
    if mode != TrainMode::Binaryconnect {
        return Ok(eval(None));
    }
    let n = samples.max(1);
    let mut acc = vec![0.0; x.ncols()];
    for _ in 0..n {
        let w1 = quantize(&params.theta1, rng, QuantMode::Stochastic);
        for (a, v) in acc.iter_mut().zip(eval(Some(&w1))) {
            *a += v;
        }
    }
    Ok(acc.into_iter().map(|a| a / n as f64).collect())
}

/// ||K(t1) - K(t0)||_F / ||K(t0)||_F for the quasi-network NTK.
pub fn measure_kernel_drift(p0: &ModelParams, p1: &ModelParams, probes: &DMatrix<f64>, varsigma_sq: f64) -> Result<f64> {
    if probes.ncols() > 64 {
        return Err(Error::Resource(format!("at most 64 probes, got {}", probes.ncols())));
    }
    let k0 = empirical_ntk(p0, probes, varsigma_sq)?;
    let k1 = empirical_ntk(p1, probes, varsigma_sq)?;
    Ok((&k1.gram - &k0.gram).norm() / k0.gram.norm())
}

/// Fraction of theta1 entries sitting on the +-1 boundary.
pub fn clip_check(params: &ModelParams) -> f64 {
    let t = params.theta1.theta();
    t.iter().filter(|v| v.abs() >= 1.0).count() as f64 / t.len() as f64
}
