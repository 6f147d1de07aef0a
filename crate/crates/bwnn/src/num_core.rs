//! Scalar special functions, Gauss quadrature rules and seeded sampling.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;
use std::f64::consts::{PI, SQRT_2};

use crate::error::{Error, Result};

/// Identifies the generator so reports can be replayed bit-for-bit.
pub const RNG_VERSION: &str = "rand_chacha-0.3.1/ChaCha8Rng;rand_distr-0.4.3/StandardNormal";

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
pub fn gauss_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal distribution function.
///
/// Evaluated through `erfc` so both tails keep full relative accuracy.
pub fn gauss_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Seeded ChaCha8 stream. Substreams share the seed and differ in the
/// 64-bit stream id, so they never overlap.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { seed, stream, inner }
    }

    /// Fresh generator on another stream of the same seed.
    pub fn fork(&self, stream: u64) -> Self {
        Self::with_stream(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in 0..n.
    pub fn below(&mut self, n: usize) -> usize {
        use rand::Rng as _;
        self.inner.gen_range(0..n)
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

pub fn sample_gaussian(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// One draw from the chi distribution with `d` degrees of freedom.
pub fn sample_chi(rng: &mut Rng, d: usize) -> Result<f64> {
    if d == 0 {
        return Err(Error::InvalidArgument("chi degrees of freedom must be >= 1".into()));
    }
    let s: f64 = (0..d).map(|_| rng.normal().powi(2)).sum();
    Ok(s.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum QuadKind {
    /// Weight 1 on [-1, 1].
    GaussLegendre,
    /// Weight exp(-x^2) on the real line.
    GaussHermite,
    /// Weight (1-x)^alpha (1+x)^beta on [-1, 1].
    GaussJacobi { alpha: f64, beta: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub kind: QuadKind,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

pub const MAX_QUAD_NODES: usize = 4096;

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sum of `w_i f(x_i)`.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }

    /// E[f(Z)] for Z ~ N(0,1); only meaningful for a Hermite rule.
    pub fn gauss_expect<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        debug_assert!(matches!(self.kind, QuadKind::GaussHermite));
        self.integrate(|x| f(SQRT_2 * x)) / PI.sqrt()
    }
}

/// Recurrence coefficients (a_k, b_k) of the orthonormal family plus the
/// total mass of the weight.
fn recurrence(kind: QuadKind, n: usize) -> (Vec<f64>, Vec<f64>, f64) {
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    match kind {
        QuadKind::GaussLegendre => {
            for k in 1..n {
                let k = k as f64;
                b[k as usize] = k / (4.0 * k * k - 1.0).sqrt();
            }
            (a, b, 2.0)
        }
        QuadKind::GaussHermite => {
            for (k, bk) in b.iter_mut().enumerate().skip(1) {
                *bk = (k as f64 / 2.0).sqrt();
            }
            (a, b, PI.sqrt())
        }
        QuadKind::GaussJacobi { alpha, beta } => {
            let ab = alpha + beta;
            a[0] = (beta - alpha) / (ab + 2.0);
            for (k, ak) in a.iter_mut().enumerate().skip(1) {
                let s = 2.0 * k as f64 + ab;
                *ak = (beta * beta - alpha * alpha) / (s * (s + 2.0));
            }
            if n > 1 {
                b[1] = (4.0 * (1.0 + alpha) * (1.0 + beta)
                    / ((2.0 + ab).powi(2) * (3.0 + ab)))
                    .sqrt();
            }
            for (k, bk) in b.iter_mut().enumerate().skip(2) {
                let kf = k as f64;
                let s = 2.0 * kf + ab;
                *bk = (4.0 * kf * (kf + alpha) * (kf + beta) * (kf + ab)
                    / (s * s * (s + 1.0) * (s - 1.0)))
                    .sqrt();
            }
            let mu0 = ((ab + 1.0) * 2f64.ln() + ln_gamma(alpha + 1.0) + ln_gamma(beta + 1.0)
                - ln_gamma(ab + 2.0))
            .exp();
            (a, b, mu0)
        }
    }
}

/// Eigenvalues of the symmetric tridiagonal matrix with diagonal `d` and
/// off-diagonal `e[1..]` (implicit QL, no eigenvectors).
fn tridiag_eigenvalues(mut d: Vec<f64>, e_in: &[f64]) -> Result<Vec<f64>> {
    let n = d.len();
    let mut e = vec![0.0; n];
    e[..n - 1].copy_from_slice(&e_in[1..n]);
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 60 {
                return Err(Error::Quadrature(e[l].abs()));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut i = m;
            let mut underflow = false;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(d)
}

/// Evaluates the orthonormal recurrence at `x`. Returns (p_n, p_n', w) where
/// the first two share an arbitrary positive scale and `w` is the
/// Christoffel weight 1 / sum_{k<n} p_k(x)^2.
fn christoffel(a: &[f64], b: &[f64], mu0: f64, x: f64) -> (f64, f64, f64) {
    let n = a.len();
    let mut log_scale = 0.0;
    let (mut p_prev, mut p) = (0.0, 1.0 / mu0.sqrt());
    let (mut dp_prev, mut dp) = (0.0, 0.0);
    let mut sum = p * p;
    for k in 0..n {
        let b_next = if k + 1 < n { b[k + 1] } else { b[k].max(1.0) };
        let p_next = ((x - a[k]) * p - b[k] * p_prev) / b_next;
        let dp_next = (p + (x - a[k]) * dp - b[k] * dp_prev) / b_next;
        p_prev = p;
        p = p_next;
        dp_prev = dp;
        dp = dp_next;
        if k + 1 < n {
            sum += p * p;
        }
        let mag = p.abs().max(p_prev.abs());
        if mag > 1e100 {
            let f = 1e-100;
            p *= f;
            p_prev *= f;
            dp *= f;
            dp_prev *= f;
            sum *= f * f;
            log_scale += 100.0 * std::f64::consts::LN_10;
        }
    }
    let w = (-2.0 * log_scale).exp() / sum;
    (p, dp, w)
}

/// Gauss rule with `n` nodes for the given weight (Golub-Welsch eigenvalues,
/// Newton-polished, Christoffel weights).
pub fn make_quadrature(kind: QuadKind, n: usize) -> Result<QuadratureRule> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("quadrature needs n >= 2, got {n}")));
    }
    if n > MAX_QUAD_NODES {
        return Err(Error::Resource(format!("quadrature order {n} exceeds {MAX_QUAD_NODES}")));
    }
    if let QuadKind::GaussJacobi { alpha, beta } = kind {
        if !(alpha > -1.0 && beta > -1.0) || !alpha.is_finite() || !beta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "Jacobi exponents must exceed -1 (alpha={alpha}, beta={beta})"
            )));
        }
    }
    let (a, b, mu0) = recurrence(kind, n);
    let mut nodes = tridiag_eigenvalues(a.clone(), &b)?;
    let mut weights = Vec::with_capacity(n);
    for x in nodes.iter_mut() {
        for _ in 0..2 {
            let (p, dp, _) = christoffel(&a, &b, mu0, *x);
            if dp != 0.0 && dp.is_finite() {
                let step = p / dp;
                if step.is_finite() && step.abs() < 1e-6 * (1.0 + x.abs()) {
                    *x -= step;
                }
            }
        }
        let (_, _, w) = christoffel(&a, &b, mu0, *x);
        weights.push(w);
    }
    if matches!(kind, QuadKind::GaussLegendre | QuadKind::GaussHermite)
        || matches!(kind, QuadKind::GaussJacobi { alpha, beta } if alpha == beta)
    {
        // symmetric weight: enforce exact mirror symmetry
        for i in 0..n / 2 {
            let j = n - 1 - i;
            let x = 0.5 * (nodes[j] - nodes[i]);
            nodes[i] = -x;
            nodes[j] = x;
            let w = 0.5 * (weights[i] + weights[j]);
            weights[i] = w;
            weights[j] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
    }
    Ok(QuadratureRule { kind, nodes, weights })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
