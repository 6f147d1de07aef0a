//! Zonal kernels on the sphere: Gegenbauer polynomials, harmonic
//! multiplicities, coefficient extraction and decay-law fits.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::ntk::{relu_sigmas, BwnnNtk, NtkMethod};
use crate::num_core::{gauss_cdf, gauss_pdf, make_quadrature, QuadKind, QuadratureRule, Rng, MAX_QUAD_NODES};

pub const MAX_DEGREE: usize = 256;
pub const MAX_TABLE_DEGREE: usize = 64;
pub const MAX_DIM: usize = 25;

fn check_dk(d: usize, k: usize) -> Result<()> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!("dimension must be >= 2, got {d}")));
    }
    if k > MAX_DEGREE {
        return Err(Error::Resource(format!("degree {k} exceeds {MAX_DEGREE}")));
    }
    Ok(())
}

/// Degree-k Gegenbauer polynomial for the sphere in R^d, normalized to
/// P_k(1) = 1 (Legendre for d = 3, Chebyshev for d = 2).
pub fn legendre_eval(d: usize, k: usize, t: f64) -> Result<f64> {
    check_dk(d, k)?;
    if !(t.abs() <= 1.0) {
        return Err(Error::Domain(format!("t = {t} outside [-1, 1]")));
    }
    Ok(*legendre_all(d, k, t).last().unwrap())
}

/// P_0(t), ..., P_kmax(t) by the three-term recurrence
/// (k+d-2) P_{k+1} = (2k+d-2) t P_k - k P_{k-1}.
pub fn legendre_all(d: usize, kmax: usize, t: f64) -> Vec<f64> {
    let mut p = Vec::with_capacity(kmax + 1);
    p.push(1.0);
    if kmax == 0 {
        return p;
    }
    p.push(t);
    let df = d as f64;
    for k in 1..kmax {
        let kf = k as f64;
        let next = ((2.0 * kf + df - 2.0) * t * p[k] - kf * p[k - 1]) / (kf + df - 2.0);
        p.push(next);
    }
    p
}

/// Dimension of degree-k spherical harmonics in R^d.
pub fn n_dk(d: usize, k: usize) -> Result<u128> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!("dimension must be >= 2, got {d}")));
    }
    if k == 0 {
        return Ok(1);
    }
    if d == 2 {
        return Ok(2);
    }
    let overflow = || Error::Resource(format!("N({d}, {k}) overflows 128 bits"));
    // (2k+d-2) * C(k+d-3, d-3) / (d-2)
    let mut binom: u128 = 1;
    let r = (d - 3) as u128;
    let top = (k + d - 3) as u128;
    for i in 0..r {
        binom = binom.checked_mul(top - i).ok_or_else(overflow)? / (i + 1);
    }
    let num = binom.checked_mul((2 * k + d - 2) as u128).ok_or_else(overflow)?;
    Ok(num / (d as u128 - 2))
}

/// Total mass Z of the weight (1-t^2)^((d-3)/2) on [-1, 1].
pub fn weight_mass(d: usize) -> f64 {
    let a = (d as f64 - 1.0) / 2.0;
    (0.5 * PI.ln() + ln_gamma(a) - ln_gamma(a + 0.5)).exp()
}

/// Basis of zonal polynomials with its orthogonality constants.
#[derive(Clone, Debug)]
pub struct GegenbauerBasis {
    pub d: usize,
    pub kmax: usize,
}

impl GegenbauerBasis {
    pub fn new(d: usize, kmax: usize) -> Result<Self> {
        check_dk(d, kmax)?;
        Ok(GegenbauerBasis { d, kmax })
    }

    pub fn eval_all(&self, t: f64) -> Vec<f64> {
        legendre_all(self.d, self.kmax, t)
    }

    /// Integral of P_k^2 against the weight, Z / N(d, k).
    pub fn norm_sq(&self, k: usize) -> Result<f64> {
        Ok(weight_mass(self.d) / n_dk(self.d, k)? as f64)
    }

    /// Largest relative deviation of the weighted Gram matrix of the basis
    /// from diag(Z / N(d, k)).
    #[allow(clippy::needless_range_loop)]
    pub fn orthogonality_residual(&self, order: usize) -> Result<f64> {
        let rule = jacobi_rule(self.d, order)?;
        let k = self.kmax;
        let mut gram = vec![vec![0.0; k + 1]; k + 1];
        for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
            let p = self.eval_all(t);
            for i in 0..=k {
                for j in 0..=i {
                    gram[i][j] += w * p[i] * p[j];
                }
            }
        }
        let mut worst: f64 = 0.0;
        for i in 0..=k {
            let ni = self.norm_sq(i)?;
            for j in 0..=i {
                let target = if i == j { ni } else { 0.0 };
                let scale = (ni * self.norm_sq(j)?).sqrt();
                worst = worst.max((gram[i][j] - target).abs() / scale);
            }
        }
        Ok(worst)
    }
}

pub fn jacobi_rule(d: usize, order: usize) -> Result<QuadratureRule> {
    let a = (d as f64 - 3.0) / 2.0;
    make_quadrature(QuadKind::GaussJacobi { alpha: a, beta: a }, order)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parity {
    Even,
    Odd,
    All,
}

impl Parity {
    pub fn admits(self, k: usize) -> bool {
        match self {
            Parity::Even => k.is_multiple_of(2),
            Parity::Odd => k % 2 == 1,
            Parity::All => true,
        }
    }

    pub fn of(k: usize) -> &'static str {
        if k.is_multiple_of(2) {
            "even"
        } else {
            "odd"
        }
    }
}

/// How coefficients were obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Route {
    /// Gauss-Jacobi projection of kernel values.
    Projection,
    /// Taylor coefficients mapped through the t P_k recurrence.
    Series,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub k_min: usize,
    pub k_max: usize,
    pub parity: Parity,
    pub n_points: usize,
    /// log u_k = slope * k + intercept.
    pub exponential: LinFit,
    /// log u_k = slope * log k + intercept; the decay exponent is -slope.
    pub power: LinFit,
}

impl DecayFit {
    pub fn power_exponent(&self) -> f64 {
        -self.power.slope
    }

    pub fn preferred(&self) -> &'static str {
        if self.exponential.r2 > self.power.r2 {
            "exponential"
        } else {
            "power-law"
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectrumTable {
    pub label: String,
    pub d: usize,
    pub route: Route,
    /// u_k (or lambda_k) for k = 0..=K.
    pub coeffs: Vec<f64>,
    pub n_dk: Vec<u128>,
    pub fits: Vec<DecayFit>,
    /// Free-form scalar diagnostics (e.g. effective t_c, cross-check residuals).
    pub notes: Vec<(String, f64)>,
}

impl SpectrumTable {
    fn new(label: &str, d: usize, route: Route, coeffs: Vec<f64>) -> Result<Self> {
        let n = (0..coeffs.len()).map(|k| n_dk(d, k)).collect::<Result<Vec<_>>>()?;
        Ok(SpectrumTable { label: label.into(), d, route, coeffs, n_dk: n, fits: Vec::new(), notes: Vec::new() })
    }

    pub fn kmax(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn note(&self, key: &str) -> Option<f64> {
        self.notes.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// sum_k u_k N(d,k) P_k(t).
    pub fn reconstruct(&self, t: f64) -> f64 {
        let p = legendre_all(self.d, self.kmax(), t);
        self.coeffs.iter().zip(&self.n_dk).zip(&p).map(|((u, n), p)| u * *n as f64 * p).sum()
    }

    /// CSV with columns k, N_dk, u_k, parity.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Data(e.to_string());
        w.write_record(["k", "N_dk", "u_k", "parity"]).map_err(err)?;
        for (k, (u, n)) in self.coeffs.iter().zip(&self.n_dk).enumerate() {
            w.write_record([k.to_string(), n.to_string(), format!("{u:e}"), Parity::of(k).to_string()])
                .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn fits_json(&self) -> serde_json::Value {
        serde_json::json!({
            "label": self.label,
            "d": self.d,
            "route": self.route,
            "fits": self.fits,
            "notes": self.notes.iter().map(|(k, v)| (k.clone(), serde_json::json!(v))).collect::<serde_json::Map<_, _>>(),
        })
    }
}

pub const DEFAULT_ORDER: usize = 256;

fn project_with(f: &dyn Fn(f64) -> f64, d: usize, kmax: usize, rule: &QuadratureRule) -> Vec<f64> {
    let z: f64 = rule.weights.iter().sum();
    let mut acc = vec![0.0; kmax + 1];
    for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
        let ft = f(t) * w;
        let p = legendre_all(d, kmax, t);
        for k in 0..=kmax {
            acc[k] += ft * p[k];
        }
    }
    acc.iter().map(|a| a / z).collect()
}

/// lambda_k = Z^{-1} int f P_k (1-t^2)^((d-3)/2) dt for k = 0..=kmax.
///
/// Fails when doubling the quadrature order moves any coefficient by more
/// than 1e-6 of the largest.
pub fn project_zonal<F: Fn(f64) -> f64>(f: F, d: usize, kmax: usize, order: usize) -> Result<SpectrumTable> {
    check_dk(d, kmax)?;
    if d > MAX_DIM {
        return Err(Error::Resource(format!("dimension {d} exceeds {MAX_DIM}")));
    }
    if kmax > MAX_TABLE_DEGREE {
        return Err(Error::Resource(format!("degree {kmax} exceeds {MAX_TABLE_DEGREE}")));
    }
    let coarse = project_with(&f, d, kmax, &jacobi_rule(d, order)?);
    let fine = project_with(&f, d, kmax, &jacobi_rule(d, (2 * order).min(MAX_QUAD_NODES))?);
    let scale = fine.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let change = coarse.iter().zip(&fine).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if change > 1e-6 * scale {
        return Err(Error::Quadrature(change / scale));
    }
    let mut t = SpectrumTable::new("projection", d, Route::Projection, fine)?;
    t.notes.push(("quadrature_change".into(), change / scale.max(f64::MIN_POSITIVE)));
    Ok(t)
}

/// Maps power-series coefficients a_n (f = sum a_n t^n) to P_k
/// coefficients b_k (f = sum b_k P_k) for k = 0..=kmax, together with the
/// sum of |terms| per k (a conditioning measure).
pub fn series_to_gegenbauer(a: &[f64], d: usize, kmax: usize) -> (Vec<f64>, Vec<f64>) {
    let df = d as f64;
    let nmax = a.len();
    let width = nmax.max(kmax + 1) + 1;
    // e[k]: coefficients of t^n in the P basis
    let mut e = vec![0.0; width];
    e[0] = 1.0;
    let mut b = vec![0.0; kmax + 1];
    let mut mag = vec![0.0; kmax + 1];
    for (n, &an) in a.iter().enumerate() {
        for k in (n % 2..=n.min(kmax)).step_by(2) {
            b[k] += an * e[k];
            mag[k] += (an * e[k]).abs();
        }
        if n + 1 == nmax {
            break;
        }
        let mut next = vec![0.0; width];
        for k in (n % 2..=n).step_by(2) {
            let ek = e[k];
            if ek == 0.0 {
                continue;
            }
            if k == 0 {
                next[1] += ek;
            } else {
                let kf = k as f64;
                let den = 2.0 * kf + df - 2.0;
                next[k - 1] += ek * kf / den;
                next[k + 1] += ek * (kf + df - 2.0) / den;
            }
        }
        e = next;
    }
    (b, mag)
}

/// P_k coefficients of t f(t) given those of f.
pub fn shift_by_t(b: &[f64], d: usize) -> Vec<f64> {
    let df = d as f64;
    let mut out = vec![0.0; b.len() + 1];
    for (k, &bk) in b.iter().enumerate() {
        if k == 0 {
            out[1] += bk;
        } else {
            let kf = k as f64;
            let den = 2.0 * kf + df - 2.0;
            out[k - 1] += bk * kf / den;
            out[k + 1] += bk * (kf + df - 2.0) / den;
        }
    }
    out
}

/// Number of Taylor terms used by the series route.
pub const SERIES_TERMS: usize = 900;

fn series_table(label: &str, a: &[f64], d: usize, kmax: usize) -> Result<SpectrumTable> {
    check_dk(d, kmax)?;
    let (b, mag) = series_to_gegenbauer(a, d, kmax);
    let mut coeffs = Vec::with_capacity(kmax + 1);
    let mut worst_cond: f64 = 1.0;
    for k in 0..=kmax {
        let n = n_dk(d, k)? as f64;
        coeffs.push(b[k] / n);
        if b[k] != 0.0 {
            worst_cond = worst_cond.max(mag[k] / b[k].abs());
        }
    }
    let mut t = SpectrumTable::new(label, d, Route::Series, coeffs)?;
    t.notes.push(("series_condition".into(), worst_cond));
    Ok(t)
}

/// Taylor coefficients (in t) of the two Gaussian expectations of the
/// BWNN kernel, via (pi - arccos x)/(2 pi) and the arc-cosine moment with
/// x = Var[theta] t.
fn bwnn_sigma_series(c: f64, d: usize, var_theta: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut s0 = vec![0.0; n];
    let mut s1 = vec![0.0; n];
    let cd = c / d as f64;
    let inv2pi = 1.0 / (2.0 * PI);
    s0[0] = 0.25;
    s1[0] = cd * inv2pi;
    if n > 1 {
        s1[1] = cd * inv2pi * (PI / 2.0) * var_theta;
    }
    // cm = (2m)! / (4^m (m!)^2)
    let mut cm = 1.0;
    let mut vpow = var_theta;
    for m in 0.. {
        // x^{2m+1} term of arcsin/(2 pi), then x^{2m+2} term of the moment
        let odd = 2 * m + 1;
        if odd >= n {
            break;
        }
        s0[odd] = inv2pi * cm / odd as f64 * vpow;
        vpow *= var_theta;
        if odd + 1 < n {
            s1[odd + 1] = cd * inv2pi * cm / ((odd * (odd + 1)) as f64) * vpow;
        }
        vpow *= var_theta;
        cm *= (2 * m + 1) as f64 / (2 * m + 2) as f64;
        if vpow == 0.0 {
            break;
        }
    }
    (s0, s1)
}

/// Taylor coefficients in t of the infinite-width BWNN NTK.
pub fn bwnn_taylor(c: f64, d: usize, var_theta: f64, beta: f64, n: usize) -> Vec<f64> {
    let (s0, s1) = bwnn_sigma_series(c, d, var_theta, n);
    let cd = c / d as f64;
    let b2 = beta * beta;
    (0..n)
        .map(|i| b2 * s0[i] + if i > 0 { cd * s0[i - 1] } else { 0.0 } + s1[i])
        .collect()
}

/// Randomized-scale Gaussian kernel (1 + 2(2 - 2t)/xi^2)^(-d/2).
pub fn rgauss_kernel(t: f64, d: usize, xi: f64) -> Result<f64> {
    if !(xi > 0.0) {
        return Err(Error::InvalidArgument(format!("xi must be positive, got {xi}")));
    }
    if !(t.abs() <= 1.0) {
        return Err(Error::Domain(format!("t = {t} outside [-1, 1]")));
    }
    Ok((1.0 + 2.0 * (2.0 - 2.0 * t) / (xi * xi)).powf(-(d as f64) / 2.0))
}

/// Monte-Carlo estimate of E_kappa exp(-kappa^2 (2 - 2t)/xi^2), kappa ~ chi_d.
/// Returns (mean, standard error).
pub fn rgauss_mc(t: f64, d: usize, xi: f64, n: usize, rng: &mut Rng) -> Result<(f64, f64)> {
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 draws".into()));
    }
    let dist = (2.0 - 2.0 * t) / (xi * xi);
    let mut s = 0.0;
    let mut ss = 0.0;
    for _ in 0..n {
        let k = crate::num_core::sample_chi(rng, d)?;
        let v = (-k * k * dist).exp();
        s += v;
        ss += v * v;
    }
    let nf = n as f64;
    let mean = s / nf;
    let var = (ss / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
    Ok((mean, (var / nf).sqrt()))
}

/// Taylor coefficients in t of the randomized-scale Gaussian kernel.
pub fn rgauss_taylor(d: usize, xi: f64, n: usize) -> Vec<f64> {
    let b = 4.0 / (xi * xi);
    let a = 1.0 + b;
    let r = b / a;
    let h = d as f64 / 2.0;
    let mut out = Vec::with_capacity(n);
    let mut c = a.powf(-h);
    for i in 0..n {
        out.push(c);
        c *= (h + i as f64) / (i as f64 + 1.0) * r;
    }
    out
}

/// Taylor coefficients of exp(-(s ||x - x'||)^2) = e^{-2 s^2} e^{2 s^2 t}.
pub fn gaussian_taylor(s: f64, n: usize) -> Vec<f64> {
    let q = 2.0 * s * s;
    let mut out = Vec::with_capacity(n);
    let mut c = (-q).exp();
    for i in 0..n {
        out.push(c);
        c *= q / (i as f64 + 1.0);
    }
    out
}

/// Which kernel a spectrum is computed for.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kernel", rename_all = "kebab-case")]
pub enum ZonalKernel {
    Bwnn { c: f64, d: usize, var_theta: f64, beta: f64 },
    Relu { c: f64, d: usize, beta: f64 },
    Rgauss { d: usize, xi: f64 },
    /// exp(-s ||x - x'||) on the sphere.
    Laplace { d: usize, s: f64 },
    /// exp(-(s ||x - x'||)^2) on the sphere.
    Gaussian { d: usize, s: f64 },
}

impl ZonalKernel {
    pub fn dim(&self) -> usize {
        match *self {
            ZonalKernel::Bwnn { d, .. }
            | ZonalKernel::Relu { d, .. }
            | ZonalKernel::Rgauss { d, .. }
            | ZonalKernel::Laplace { d, .. }
            | ZonalKernel::Gaussian { d, .. } => d,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ZonalKernel::Bwnn { .. } => "bwnn",
            ZonalKernel::Relu { .. } => "relu",
            ZonalKernel::Rgauss { .. } => "rgauss",
            ZonalKernel::Laplace { .. } => "laplace",
            ZonalKernel::Gaussian { .. } => "gaussian",
        }
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        let t = t.clamp(-1.0, 1.0);
        match *self {
            ZonalKernel::Bwnn { c, d, var_theta, beta } => {
                Ok(crate::ntk::bwnn_closed_form(t, c, d, var_theta, beta))
            }
            ZonalKernel::Relu { c, d, beta } => crate::ntk::analytic_ntk_relu(t, c, d, beta),
            ZonalKernel::Rgauss { d, xi } => rgauss_kernel(t, d, xi),
            ZonalKernel::Laplace { s, .. } => Ok((-s * (2.0 - 2.0 * t).max(0.0).sqrt()).exp()),
            ZonalKernel::Gaussian { s, .. } => Ok((-s * s * (2.0 - 2.0 * t)).exp()),
        }
    }

    /// Nonnegative Taylor coefficients in t, where the kernel has them.
    pub fn taylor(&self, n: usize) -> Option<Vec<f64>> {
        match *self {
            ZonalKernel::Bwnn { c, d, var_theta, beta } if var_theta < 1.0 => {
                Some(bwnn_taylor(c, d, var_theta, beta, n))
            }
            ZonalKernel::Rgauss { d, xi } => Some(rgauss_taylor(d, xi, n)),
            ZonalKernel::Gaussian { s, .. } => Some(gaussian_taylor(s, n)),
            _ => None,
        }
    }

    /// Coefficients u_k for k = 0..=kmax. Kernels with a convergent
    /// nonnegative Taylor series use the series route, which keeps full
    /// relative precision far below the projection noise floor; the rest
    /// are projected with a Gauss-Jacobi rule of the given order.
    pub fn spectrum(&self, kmax: usize, order: usize) -> Result<SpectrumTable> {
        let d = self.dim();
        if d > MAX_DIM {
            return Err(Error::Resource(format!("dimension {d} exceeds {MAX_DIM}")));
        }
        if kmax > MAX_TABLE_DEGREE {
            return Err(Error::Resource(format!("degree {kmax} exceeds {MAX_TABLE_DEGREE}")));
        }
        let mut table = match self.taylor(SERIES_TERMS) {
            Some(a) => series_table(self.name(), &a, d, kmax)?,
            None => {
                let me = *self;
                let mut t = project_zonal(move |t| me.eval(t).unwrap_or(f64::NAN), d, kmax, order)?;
                t.label = self.name().into();
                t
            }
        };
        // low-degree agreement with direct projection
        if table.route == Route::Series {
            let me = *self;
            let k_check = kmax.min(8);
            let proj = project_with(&move |t| me.eval(t).unwrap_or(f64::NAN), d, k_check, &jacobi_rule(d, order)?);
            let scale = table.max_abs();
            let dev = (0..=k_check).fold(0.0f64, |m, k| m.max((proj[k] - table.coeffs[k]).abs()));
            table.notes.push(("projection_crosscheck".into(), dev / scale));
        }
        Ok(table)
    }
}

/// Spectrum of the infinite-width BWNN NTK with diagnostics: effective
/// t_c, and the agreement of the (c t/d) Sigma0 term obtained by shifting
/// Sigma0's coefficients with the recurrence against direct projection.
pub fn kernel_eigen_bwnn(c: f64, d: usize, var_theta: f64, beta: f64, kmax: usize) -> Result<SpectrumTable> {
    BwnnNtk::new(c, d, var_theta, beta, NtkMethod::ClosedForm)?;
    let kernel = ZonalKernel::Bwnn { c, d, var_theta, beta };
    let mut table = kernel.spectrum(kmax, DEFAULT_ORDER)?;
    let tc = if var_theta < 1.0 { (var_theta / (1.0 - var_theta)).sqrt() } else { f64::INFINITY };
    table.notes.push(("t_c".into(), tc));
    table.notes.push(("asymptotic_ratio".into(), tc * tc / (2.0 * (1.0 + tc * tc))));
    // shift check on low degrees
    let k_check = kmax.min(10);
    let sigma0 = |t: f64| 0.25 + (var_theta * t).clamp(-1.0, 1.0).asin() / (2.0 * PI);
    let rule = jacobi_rule(d, DEFAULT_ORDER)?;
    let s0 = project_with(&sigma0, d, k_check + 1, &rule);
    let b0: Vec<f64> = (0..=k_check).map(|k| s0[k] * n_dk(d, k).unwrap() as f64).collect();
    let shifted = shift_by_t(&b0, d);
    let direct = project_with(&|t: f64| t * sigma0(t), d, k_check, &rule);
    let mut dev: f64 = 0.0;
    for k in 0..k_check {
        let via_shift = shifted[k] / n_dk(d, k)? as f64;
        dev = dev.max((via_shift - direct[k]).abs());
    }
    table.notes.push(("shift_crosscheck".into(), dev));
    Ok(table)
}

pub fn kernel_eigen_relu(c: f64, d: usize, beta: f64, kmax: usize, order: usize) -> Result<SpectrumTable> {
    relu_sigmas(0.0)?;
    ZonalKernel::Relu { c, d, beta }.spectrum(kmax, order)
}

pub fn kernel_eigen_rgauss(d: usize, xi: f64, kmax: usize) -> Result<SpectrumTable> {
    if !(xi > 0.0) {
        return Err(Error::InvalidArgument(format!("xi must be positive, got {xi}")));
    }
    ZonalKernel::Rgauss { d, xi }.spectrum(kmax, DEFAULT_ORDER)
}

/// Taylor coefficients of psi(c_hat t) with unit smoothing scale.
pub fn act_taylor(c_hat: f64, n: usize) -> Vec<f64> {
    let mut a = vec![0.0; n];
    let inv = 1.0 / (2.0 * PI).sqrt();
    a[0] = inv;
    if n > 1 {
        a[1] = 0.5 * c_hat;
    }
    // (1/sqrt(2 pi)) sum_m (-1)^m x^{2m+2} / (2^m m! (2m+1)(2m+2))
    let mut g = 1.0;
    let c2 = c_hat * c_hat;
    let mut cp = c2;
    for m in 0.. {
        let p = 2 * m + 2;
        if p >= n {
            break;
        }
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        a[p] = inv * sign * g / (((2 * m + 1) * (2 * m + 2)) as f64) * cp;
        g /= 2.0 * (m + 1) as f64;
        cp *= c2;
        if cp == 0.0 || g == 0.0 {
            break;
        }
    }
    a
}

/// Taylor coefficients of Phi(c_hat t).
pub fn act_grad_taylor(c_hat: f64, n: usize) -> Vec<f64> {
    let mut a = vec![0.0; n];
    a[0] = 0.5;
    let inv = 1.0 / (2.0 * PI).sqrt();
    let mut g = 1.0;
    let c2 = c_hat * c_hat;
    let mut cp = c_hat;
    for m in 0.. {
        let p = 2 * m + 1;
        if p >= n {
            break;
        }
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        a[p] = inv * sign * g / (2 * m + 1) as f64 * cp;
        g /= 2.0 * (m + 1) as f64;
        cp *= c2;
        if cp == 0.0 || g == 0.0 {
            break;
        }
    }
    a
}

/// Parity pattern of an activation expansion.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParityCheck {
    /// Parity on which coefficients may be nonzero (beyond `exempt`).
    pub supported: Parity,
    /// Degree excluded from the forbidden class (the linear or constant term).
    pub exempt: usize,
    /// max |lambda_k| over the forbidden class, relative to max |lambda|.
    pub forbidden_rel: f64,
    /// Supported-parity degrees (up to `positivity_kmax`) whose coefficient is not positive.
    pub nonpositive: Vec<usize>,
    pub positivity_kmax: usize,
}

impl ParityCheck {
    pub fn parity_ok(&self) -> bool {
        self.forbidden_rel < 1e-9
    }

    pub fn positivity_ok(&self) -> bool {
        self.nonpositive.is_empty()
    }
}

pub fn parity_check(table: &SpectrumTable, supported: Parity, exempt: usize, positivity_kmax: usize) -> ParityCheck {
    let scale = table.max_abs();
    let mut forbidden: f64 = 0.0;
    let mut nonpositive = Vec::new();
    for (k, &v) in table.coeffs.iter().enumerate() {
        if supported.admits(k) {
            if k <= positivity_kmax && !(v > 0.0) {
                nonpositive.push(k);
            }
        } else if k != exempt {
            forbidden = forbidden.max(v.abs());
        }
    }
    ParityCheck {
        supported,
        exempt,
        forbidden_rel: forbidden / scale,
        nonpositive,
        positivity_kmax,
    }
}

/// Expansion coefficients of psi(c_hat t) and Phi(c_hat t) (unit smoothing
/// scale). Projection supplies the tables; the series route supplies
/// degrees below the projection noise floor and is recorded alongside.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ActivationSpectra {
    pub act: SpectrumTable,
    pub grad: SpectrumTable,
    pub act_projected: SpectrumTable,
    pub grad_projected: SpectrumTable,
    pub act_parity: ParityCheck,
    pub grad_parity: ParityCheck,
}

pub fn activation_coeffs(c_hat: f64, d: usize, kmax: usize) -> Result<ActivationSpectra> {
    if !(c_hat > 0.0) {
        return Err(Error::InvalidArgument(format!("c_hat must be positive, got {c_hat}")));
    }
    let proj_act = project_zonal(|t| psi_unit(c_hat * t), d, kmax, DEFAULT_ORDER)?;
    let proj_grad = project_zonal(|t| gauss_cdf(c_hat * t), d, kmax, DEFAULT_ORDER)?;
    let mut act = series_table("psi", &act_taylor(c_hat, SERIES_TERMS), d, kmax)?;
    let mut grad = series_table("psi'", &act_grad_taylor(c_hat, SERIES_TERMS), d, kmax)?;
    for (s, p) in [(&mut act, &proj_act), (&mut grad, &proj_grad)] {
        let scale = s.max_abs();
        let dev = s.coeffs.iter().zip(&p.coeffs).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        s.notes.push(("projection_crosscheck".into(), dev / scale));
    }
    // Forbidden-parity mass is measured on the projected coefficients (the
    // series route has exact zeros there); signs come from the series,
    // which resolves degrees below the projection noise floor.
    let pk = kmax.min(20);
    let mut act_parity = parity_check(&act, Parity::Even, 1, pk);
    act_parity.forbidden_rel = parity_check(&proj_act, Parity::Even, 1, pk).forbidden_rel;
    let mut grad_parity = parity_check(&grad, Parity::Odd, 0, pk);
    grad_parity.forbidden_rel = parity_check(&proj_grad, Parity::Odd, 0, pk).forbidden_rel;
    Ok(ActivationSpectra { act, grad, act_projected: proj_act, grad_projected: proj_grad, act_parity, grad_parity })
}

fn psi_unit(x: f64) -> f64 {
    gauss_pdf(x) + x * gauss_cdf(x)
}

/// Least-squares line through (x, y) with coefficient of determination.
pub fn linear_fit(x: &[f64], y: &[f64]) -> LinFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    LinFit { slope, intercept, r2 }
}

/// Fits exponential and power-law decay to |u_k| on one parity class of
/// [k_min, k_max]. Degrees with u_k <= 0 are skipped.
pub fn fit_decay(table: &SpectrumTable, k_min: usize, k_max: usize, parity: Parity) -> Result<DecayFit> {
    let k_max = k_max.min(table.kmax());
    let mut ks = Vec::new();
    let mut logs = Vec::new();
    for k in k_min.max(1)..=k_max {
        let u = table.coeffs[k];
        if parity.admits(k) && u > 0.0 && u.is_finite() {
            ks.push(k as f64);
            logs.push(u.ln());
        }
    }
    if ks.len() < 6 {
        return Err(Error::InvalidArgument(format!(
            "need at least 6 positive coefficients in [{k_min}, {k_max}], found {}",
            ks.len()
        )));
    }
    let logk: Vec<f64> = ks.iter().map(|k| k.ln()).collect();
    Ok(DecayFit {
        k_min,
        k_max,
        parity,
        n_points: ks.len(),
        exponential: linear_fit(&ks, &logs),
        power: linear_fit(&logk, &logs),
    })
}

/// Largest k_max such that every coefficient up to it exceeds `floor`.
pub fn default_window_end(table: &SpectrumTable, floor: f64) -> usize {
    let mut end = 0;
    for (k, &u) in table.coeffs.iter().enumerate() {
        if u.abs() > floor {
            end = k;
        }
    }
    end
}

/// Per-degree decay rate sqrt(u_{k+2}/u_k).
pub fn degree_rate(table: &SpectrumTable, k: usize) -> Option<f64> {
    let a = *table.coeffs.get(k)?;
    let b = *table.coeffs.get(k + 2)?;
    if a > 0.0 && b > 0.0 {
        Some((b / a).sqrt())
    } else {
        None
    }
}

/// Fit of log|lambda_k| - k log(c_hat sqrt(e/k) / 2) against log k over the
/// given parity class, i.e. the polynomial factor left after removing the
/// leading super-exponential decay.
pub fn asymptotic_residual_fit(table: &SpectrumTable, c_hat: f64, k_min: usize, k_max: usize, parity: Parity) -> Result<LinFit> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for k in k_min.max(1)..=k_max.min(table.kmax()) {
        let v = table.coeffs[k].abs();
        if parity.admits(k) && v > 0.0 {
            let kf = k as f64;
            let lead = kf * (c_hat / 2.0 * (std::f64::consts::E / kf).sqrt()).ln();
            x.push(kf.ln());
            y.push(v.ln() - lead);
        }
    }
    if x.len() < 3 {
        return Err(Error::InvalidArgument("too few coefficients for asymptotic fit".into()));
    }
    Ok(linear_fit(&x, &y))
}
