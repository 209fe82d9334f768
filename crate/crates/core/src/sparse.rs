//! Sparse single-component PLS: soft-thresholding of `σ̂`, the sPLS and
//! alternative estimators, support sets and the sparse signal constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, dot, norm2, Matrix, SymMatrix};
use crate::single::{check_delta, check_tau, empirical_moments, g_func};

/// Relative degenerate tolerance on `σ̃ᵀΣσ̃` (against `‖σ̃‖² Tr(Σ)`).
pub const DEGENERATE_TOL: f64 = 1e-12;
/// Explicit constant in the signal-strength requirement.
pub const C0: f64 = 384.0;
/// Bound on `λ̃⁻¹λ` on the sparse deviation event.
pub const F: f64 = 112.0;

/// Which sparse estimator (and hence which threshold level) is meant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparseVariant {
    /// `(σ̃ᵀσ̂/σ̃ᵀΣσ̃) σ̃` with `μ = 2τ√((2/n) ln(2p/δ))`
    Spls,
    /// `(σ̃ᵀσ̃/σ̃ᵀΣσ̃) σ̃` with `μ = 2τ√((2/n) ln(p/δ))`
    Alt,
}

impl SparseVariant {
    /// Log argument appearing inside `μ`: `2p/δ` or `p/δ`.
    pub fn log_term(self, p: usize, delta: f64) -> f64 {
        match self {
            SparseVariant::Spls => (2.0 * p as f64 / delta).ln(),
            SparseVariant::Alt => (p as f64 / delta).ln(),
        }
    }
}

/// `sgn(s_j)(|s_j| − μ)₊` coordinatewise.
pub fn soft_threshold(s: &[f64], mu: f64) -> Result<Vec<f64>> {
    if !(mu >= 0.0) {
        return Err(Error::invalid(format!("threshold must be >= 0, got {mu}")));
    }
    Ok(s.iter().map(|&v| soft(v, mu)).collect())
}

#[inline]
fn soft(v: f64, mu: f64) -> f64 {
    let shrunk = v.abs() - mu;
    if shrunk > 0.0 {
        v.signum() * shrunk
    } else {
        0.0
    }
}

/// Threshold level `μ` for the given variant.
pub fn mu_level(tau: f64, n: usize, p: usize, delta: f64, variant: SparseVariant) -> Result<f64> {
    check_tau(tau)?;
    if n == 0 || p == 0 {
        return Err(Error::invalid("mu_level requires n >= 1 and p >= 1"));
    }
    check_delta(delta, 1.0)?;
    let log = variant.log_term(p, delta);
    if !(log > 0.0) {
        return Err(Error::invalid(format!(
            "log argument for mu is <= 1 (p = {p}, delta = {delta})"
        )));
    }
    Ok(2.0 * tau * (2.0 / n as f64 * log).sqrt())
}

/// Closed-form sPLS weight `σ̃/‖σ̃‖₂`. Returns the zero vector and `true`
/// when every coordinate is thresholded away.
pub fn spls_weight(sigma_hat: &[f64], mu: f64) -> Result<(Vec<f64>, bool)> {
    let st = soft_threshold(sigma_hat, mu)?;
    let norm = norm2(&st);
    if norm == 0.0 {
        return Ok((st, true));
    }
    Ok((linalg::scaled(1.0 / norm, &st), false))
}

/// Output of the sparse estimators.
#[derive(Debug, Clone, Serialize)]
pub struct SparseFit {
    pub variant: SparseVariant,
    pub mu: f64,
    /// `σ̂ = XᵀY/n`
    pub sigma_hat: Vec<f64>,
    /// Soft-thresholded `σ̂`.
    pub sigma_tilde: Vec<f64>,
    /// `σ̃/‖σ̃‖₂`, or zero.
    pub w_tilde: Vec<f64>,
    pub beta: Vec<f64>,
    /// `λ̃ = σ̃ᵀΣσ̃/σ̃ᵀσ̂` (spls) or `λ̃* = σ̃ᵀΣσ̃/σ̃ᵀσ̃` (alt); infinite if undefined.
    pub lambda_ratio: f64,
    /// `Ĵ = {j : |σ̂_j| > μ}`
    pub support_hat: Vec<usize>,
    pub degenerate: bool,
}

/// sPLS estimator `(σ̃ᵀσ̂/σ̃ᵀΣσ̃) σ̃`. `mu_override` replaces the calibrated μ.
pub fn spls_estimator(
    x: &Matrix,
    y: &[f64],
    tau: f64,
    delta: f64,
    mu_override: Option<f64>,
) -> Result<SparseFit> {
    sparse_estimator(x, y, tau, delta, mu_override, SparseVariant::Spls)
}

/// Alternative estimator `(σ̃ᵀσ̃/σ̃ᵀΣσ̃) σ̃`. `mu_override` replaces the calibrated μ.
pub fn alt_estimator(
    x: &Matrix,
    y: &[f64],
    tau: f64,
    delta: f64,
    mu_override: Option<f64>,
) -> Result<SparseFit> {
    sparse_estimator(x, y, tau, delta, mu_override, SparseVariant::Alt)
}

fn sparse_estimator(
    x: &Matrix,
    y: &[f64],
    tau: f64,
    delta: f64,
    mu_override: Option<f64>,
    variant: SparseVariant,
) -> Result<SparseFit> {
    check_delta(delta, 0.5)?;
    let mu = match mu_override {
        Some(mu) if mu >= 0.0 && mu.is_finite() => mu,
        Some(mu) => return Err(Error::invalid(format!("mu override must be >= 0, got {mu}"))),
        None => mu_level(tau, x.rows(), x.cols(), delta, variant)?,
    };
    let (sigma_hat, sigma) = empirical_moments(x, y)?;
    sparse_from_moments(sigma_hat, &sigma, mu, variant)
}

/// Sparse estimator from precomputed `σ̂`, `Σ` and threshold.
pub fn sparse_from_moments(
    sigma_hat: Vec<f64>,
    sigma: &SymMatrix,
    mu: f64,
    variant: SparseVariant,
) -> Result<SparseFit> {
    if sigma_hat.len() != sigma.dim() {
        return Err(Error::invalid("sigma_hat and Gram matrix dimensions differ"));
    }
    let sigma_tilde = soft_threshold(&sigma_hat, mu)?;
    let support_hat: Vec<usize> = sigma_hat
        .iter()
        .enumerate()
        .filter(|(_, v)| v.abs() > mu)
        .map(|(j, _)| j)
        .collect();
    let tt = dot(&sigma_tilde, &sigma_tilde);
    let quad = sigma.quad_form(&sigma_tilde);
    let numerator = match variant {
        SparseVariant::Spls => dot(&sigma_tilde, &sigma_hat),
        SparseVariant::Alt => tt,
    };
    let w_tilde = if tt > 0.0 {
        linalg::scaled(1.0 / tt.sqrt(), &sigma_tilde)
    } else {
        vec![0.0; sigma_tilde.len()]
    };
    let degenerate = tt == 0.0 || quad <= DEGENERATE_TOL * tt * linalg::trace(sigma);
    let (beta, lambda_ratio) = if degenerate {
        (vec![0.0; sigma_tilde.len()], f64::INFINITY)
    } else {
        let lambda_ratio = if numerator != 0.0 {
            quad / numerator
        } else {
            f64::INFINITY
        };
        (linalg::scaled(numerator / quad, &sigma_tilde), lambda_ratio)
    };
    Ok(SparseFit {
        variant,
        mu,
        sigma_hat,
        sigma_tilde,
        w_tilde,
        beta,
        lambda_ratio,
        support_hat,
        degenerate,
    })
}

/// Support sets of a population covariance vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SupportSets {
    /// `{j : σ_j ≠ 0}`
    pub j0: Vec<usize>,
    /// `{j : |σ_j| > μ/2}`
    pub j01: Vec<usize>,
    /// `{j : |σ_j| > 2μ}`
    pub j02: Vec<usize>,
}

pub fn support_sets(sigma: &[f64], mu: f64) -> Result<SupportSets> {
    if !(mu > 0.0) {
        return Err(Error::invalid(format!("support_sets requires mu > 0, got {mu}")));
    }
    let pick = |pred: &dyn Fn(f64) -> bool| -> Vec<usize> {
        sigma
            .iter()
            .enumerate()
            .filter(|(_, v)| pred(**v))
            .map(|(j, _)| j)
            .collect()
    };
    Ok(SupportSets {
        j0: pick(&|v| v != 0.0),
        j01: pick(&|v| v.abs() > mu / 2.0),
        j02: pick(&|v| v.abs() > 2.0 * mu),
    })
}

/// Which closed form of `d_{δ,p}` to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DMode {
    /// `C₀ (ln(10/δ) + ln(p/δ))`
    Theorem,
    /// `4 g(x_{0,δ}) + 192 ln(2p/δ)`
    Proof,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SparseConstants {
    pub delta: f64,
    pub p: usize,
    /// Calibrated sPLS threshold level.
    pub mu: f64,
    /// `ln(10/δ)`
    pub x0_delta: f64,
    pub d_delta_p: f64,
    pub mode: DMode,
    pub c0: f64,
    pub f: f64,
}

/// Sparse deviation level `x_{0,δ} = ln(10/δ)`.
pub fn x0_delta(delta: f64) -> f64 {
    (10.0 / delta).ln()
}

/// `d_{δ,p}` in either closed form.
pub fn d_delta_p(delta: f64, p: usize, mode: DMode) -> Result<f64> {
    let x0 = x0_delta(delta);
    Ok(match mode {
        DMode::Theorem => C0 * (x0 + (p as f64 / delta).ln()),
        DMode::Proof => 4.0 * g_func(x0)? + 192.0 * (2.0 * p as f64 / delta).ln(),
    })
}

pub fn sparse_constants(
    tau: f64,
    n: usize,
    p: usize,
    delta: f64,
    mode: DMode,
) -> Result<SparseConstants> {
    check_delta(delta, 0.5)?;
    if p == 0 {
        return Err(Error::invalid("p must be >= 1"));
    }
    Ok(SparseConstants {
        delta,
        p,
        mu: mu_level(tau, n, p, delta, SparseVariant::Spls)?,
        x0_delta: x0_delta(delta),
        d_delta_p: d_delta_p(delta, p, mode)?,
        mode,
        c0: C0,
        f: F,
    })
}
