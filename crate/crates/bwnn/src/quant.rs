//! Stochastic binary quantization of the real-valued weight buffer.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num_core::Rng;

/// Entries this far outside [-1, 1] are treated as rounding drift and clamped.
pub const CLAMP_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantMode {
    /// w = +1 with probability (theta + 1) / 2.
    #[default]
    Stochastic,
    /// w = sign(theta), with sign(0) = +1.
    Sign,
}

/// Real-valued buffer whose entries live in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct QuantBuffer {
    theta: DMatrix<f64>,
}

/// Checks one entry, clamping drift of at most `CLAMP_TOL`.
pub fn check_theta(theta: f64) -> Result<f64> {
    if !theta.is_finite() || theta.abs() > 1.0 + CLAMP_TOL {
        return Err(Error::Domain(format!("theta = {theta} outside [-1, 1]")));
    }
    Ok(theta.clamp(-1.0, 1.0))
}

impl QuantBuffer {
    pub fn new(mut theta: DMatrix<f64>) -> Result<Self> {
        for v in theta.iter_mut() {
            *v = check_theta(*v)?;
        }
        Ok(QuantBuffer { theta })
    }

    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    /// Mutable access for optimizers; callers must restore the range with
    /// [`QuantBuffer::clip`].
    pub fn theta_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.theta
    }

    pub fn clip(&mut self) {
        for v in self.theta.iter_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.theta.shape()
    }

    /// Empirical variance of the entries around zero mean.
    pub fn second_moment(&self) -> f64 {
        self.theta.iter().map(|t| t * t).sum::<f64>() / self.theta.len() as f64
    }
}

/// Draws a binary matrix. Entries are visited in column-major order, one
/// uniform per entry in stochastic mode.
pub fn quantize(buffer: &QuantBuffer, rng: &mut Rng, mode: QuantMode) -> DMatrix<f64> {
    match mode {
        QuantMode::Stochastic => buffer.theta.map(|t| {
            let p = 0.5 * (t + 1.0);
            if rng.uniform() < p {
                1.0
            } else {
                -1.0
            }
        }),
        QuantMode::Sign => buffer.theta.map(|t| if t >= 0.0 { 1.0 } else { -1.0 }),
    }
}

/// Quantizes a raw slice, validating each entry.
pub fn quantize_slice(theta: &[f64], rng: &mut Rng, mode: QuantMode) -> Result<Vec<f64>> {
    theta
        .iter()
        .map(|&t| {
            let t = check_theta(t)?;
            Ok(match mode {
                QuantMode::Stochastic => {
                    if rng.uniform() < 0.5 * (t + 1.0) {
                        1.0
                    } else {
                        -1.0
                    }
                }
                QuantMode::Sign => {
                    if t >= 0.0 {
                        1.0
                    } else {
                        -1.0
                    }
                }
            })
        })
        .collect()
}

/// Conditional mean and variance of a quantized entry.
pub fn quantize_mean_var(theta: f64) -> Result<(f64, f64)> {
    let t = check_theta(theta)?;
    Ok((t, 1.0 - t * t))
}
