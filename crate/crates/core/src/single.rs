//! Single-component PLS: the closed-form estimator, the test-thresholded
//! estimator and the scalar constants that drive its test.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, dot, Matrix, SymMatrix};

/// Below this value `σ̂ᵀΣσ̂` is treated as exactly zero.
pub const DEGENERATE_TOL: f64 = 1e-300;

/// `r` used when reporting the single-component bound.
pub const DEFAULT_R: f64 = 0.5;

/// `g(x) = 1 + 2x + 2√x`.
pub fn g_func(x: f64) -> Result<f64> {
    if !(x >= 0.0) || !x.is_finite() {
        return Err(Error::invalid(format!("g(x) requires finite x >= 0, got {x}")));
    }
    Ok(1.0 + 2.0 * x + 2.0 * x.sqrt())
}

/// Deviation level `x_δ = ln(5/δ)` for the dense events.
pub fn x_delta(delta: f64) -> f64 {
    (5.0 / delta).ln()
}

pub(crate) fn check_delta(delta: f64, upper: f64) -> Result<()> {
    if !(delta > 0.0 && delta < upper) {
        return Err(Error::invalid(format!(
            "delta must lie in (0, {upper}), got {delta}"
        )));
    }
    Ok(())
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("tau must be finite and > 0, got {tau}")));
    }
    Ok(())
}

/// Scalar constants of the thresholded single-component estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Theorem1Constants {
    pub delta: f64,
    pub r: f64,
    /// `ln(5/δ)`
    pub x_delta: f64,
    /// `g(x_δ)`
    pub g_x: f64,
    /// Test threshold multiplier `t_{δ,r} = 2g/r + g + 2x_δ`.
    pub t_delta_r: f64,
    /// High-signal level `h_{δ,r} = 2(t_{δ,r} + g + 4x_δ)`.
    pub h_delta_r: f64,
    /// Bound on `λ̂⁻¹λ` on the deviation event.
    pub c_delta_r: f64,
    /// `p_n = (τ²/n) ρ(Σ) Tr(Σ)`
    pub p_n: f64,
}

/// `C_{δ,r} = (1 + r + 2√(2r x_δ/g)) / (1 + r − ((1+r)/2 + 2r/(1+r)))`.
pub fn c_delta_r(x_delta: f64, g_x: f64, r: f64) -> Result<f64> {
    let num = 1.0 + r + 2.0 * (2.0 * r * x_delta / g_x).sqrt();
    let den = 1.0 + r - ((1.0 + r) / 2.0 + 2.0 * r / (1.0 + r));
    if !(den > 0.0) {
        return Err(Error::invalid(format!(
            "C_delta,r denominator {den} is not positive for r = {r}"
        )));
    }
    Ok(num / den)
}

pub fn theorem1_constants(
    delta: f64,
    r: f64,
    tau: f64,
    n: usize,
    sigma: &SymMatrix,
) -> Result<Theorem1Constants> {
    check_delta(delta, 1.0)?;
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::invalid(format!("r must lie in (0, 1), got {r}")));
    }
    check_tau(tau)?;
    if n == 0 {
        return Err(Error::invalid("n must be >= 1"));
    }
    let x = x_delta(delta);
    let g = g_func(x)?;
    let t = 2.0 * g / r + g + 2.0 * x;
    let h = 2.0 * (t + g + 4.0 * x);
    let c = c_delta_r(x, g, r)?;
    let p_n = tau * tau / n as f64 * linalg::rho(sigma)? * linalg::trace(sigma);
    Ok(Theorem1Constants {
        delta,
        r,
        x_delta: x,
        g_x: g,
        t_delta_r: t,
        h_delta_r: h,
        c_delta_r: c,
        p_n,
    })
}

/// A coefficient estimate together with the degenerate-case flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub beta: Vec<f64>,
    /// The defining ratio had a vanishing denominator and `beta` was set to zero.
    pub degenerate: bool,
}

/// `(σ̂ᵀσ̂ / σ̂ᵀΣσ̂) · σ̂`, zero when the denominator vanishes.
pub fn single_component_estimator(sigma_hat: &[f64], sigma: &SymMatrix) -> Result<Estimate> {
    if sigma_hat.len() != sigma.dim() {
        return Err(Error::invalid(format!(
            "sigma_hat has length {} but Gram matrix has dimension {}",
            sigma_hat.len(),
            sigma.dim()
        )));
    }
    let quad = sigma.quad_form(sigma_hat);
    if quad <= DEGENERATE_TOL {
        return Ok(Estimate {
            beta: vec![0.0; sigma_hat.len()],
            degenerate: true,
        });
    }
    let intensity = dot(sigma_hat, sigma_hat) / quad;
    Ok(Estimate {
        beta: linalg::scaled(intensity, sigma_hat),
        degenerate: false,
    })
}

/// Diagnostics from [`thresholded_estimator`].
#[derive(Debug, Clone, Serialize)]
pub struct SingleFitDiagnostics {
    /// `σ̂ = XᵀY/n`
    pub sigma_hat: Vec<f64>,
    /// `σ̂ᵀΣσ̂`
    pub quad_form: f64,
    /// `σ̂ᵀσ̂ / σ̂ᵀΣσ̂` (infinite when `quad_form` is zero)
    pub intensity: f64,
    /// `t_{δ,r} · p_n`
    pub test_threshold: f64,
    pub test_passed: bool,
    pub constants: Theorem1Constants,
}

/// `σ̂ = XᵀY/n` and `Σ = XᵀX/n`, with input validation.
pub fn empirical_moments(x: &Matrix, y: &[f64]) -> Result<(Vec<f64>, SymMatrix)> {
    let n = x.rows();
    if y.len() != n {
        return Err(Error::invalid(format!(
            "response has length {} but design has {} rows",
            y.len(),
            n
        )));
    }
    if !linalg::is_finite_vec(y) {
        return Err(Error::invalid("response contains non-finite values"));
    }
    let sigma = linalg::gram(x, n)?;
    let sigma_hat = linalg::scaled(1.0 / n as f64, &x.tr_mul_vec(y)?);
    Ok((sigma_hat, sigma))
}

/// Single-component PLS estimate kept only when `σ̂ᵀΣσ̂ > t_{δ,r} p_n`,
/// zero otherwise. `r` defaults to 1/2.
pub fn thresholded_estimator(
    x: &Matrix,
    y: &[f64],
    tau: f64,
    delta: f64,
    r: Option<f64>,
) -> Result<(Vec<f64>, SingleFitDiagnostics)> {
    let (sigma_hat, sigma) = empirical_moments(x, y)?;
    let consts = theorem1_constants(delta, r.unwrap_or(DEFAULT_R), tau, x.rows(), &sigma)?;
    Ok(thresholded_from_moments(sigma_hat, &sigma, consts))
}

/// Same as [`thresholded_estimator`] with precomputed moments and constants.
pub fn thresholded_from_moments(
    sigma_hat: Vec<f64>,
    sigma: &SymMatrix,
    constants: Theorem1Constants,
) -> (Vec<f64>, SingleFitDiagnostics) {
    let quad = sigma.quad_form(&sigma_hat);
    let threshold = constants.t_delta_r * constants.p_n;
    let passed = quad > threshold;
    let intensity = if quad > 0.0 {
        dot(&sigma_hat, &sigma_hat) / quad
    } else {
        f64::INFINITY
    };
    let beta = if passed {
        linalg::scaled(intensity, &sigma_hat)
    } else {
        vec![0.0; sigma_hat.len()]
    };
    (
        beta,
        SingleFitDiagnostics {
            sigma_hat,
            quad_form: quad,
            intensity,
            test_threshold: threshold,
            test_passed: passed,
            constants,
        },
    )
}
