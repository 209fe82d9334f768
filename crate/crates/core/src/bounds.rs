//! Deviation terms, Laurent-type quadratic-form thresholds and the
//! right-hand sides of the prediction-loss bounds.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::linalg::{self, dot, Matrix, SymMatrix};
use crate::single::{c_delta_r, check_delta, g_func, x_delta, DEFAULT_R};
use crate::sparse::{d_delta_p, x0_delta, DMode, SparseVariant, F};

/// Population quantities shared by every bound evaluation of a scenario.
///
/// Spectral quantities are computed once here so replicate loops stay cheap.
#[derive(Debug, Clone)]
pub struct PopulationContext {
    pub beta: Vec<f64>,
    pub gram: SymMatrix,
    pub tau: f64,
    pub n: usize,
    /// `σ = Σβ`
    pub sigma: Vec<f64>,
    /// `σᵀΣσ/‖σ‖²`, zero when `σ = 0`.
    pub lambda: f64,
    /// `|J₀|`
    pub s: usize,
    pub j0: Vec<usize>,
    /// `‖σ‖²`
    pub sigma_sq: f64,
    /// `σᵀΣσ`
    pub sigma_quad: f64,
    pub rho: f64,
    pub trace: f64,
    /// `Tr(Σ²)`
    pub trace_sq: f64,
    pub rho_j0: f64,
    pub trace_j0: f64,
    /// `Tr(Σ_{J₀}²)`
    pub trace_sq_j0: f64,
}

impl PopulationContext {
    pub fn new(beta: Vec<f64>, gram: SymMatrix, tau: f64, n: usize) -> Result<Self> {
        if beta.len() != gram.dim() {
            return Err(Error::invalid(format!(
                "beta has length {} but the Gram matrix is {}x{}",
                beta.len(),
                gram.dim(),
                gram.dim()
            )));
        }
        if !(tau >= 0.0) || !tau.is_finite() {
            return Err(Error::invalid(format!("tau must be finite and >= 0, got {tau}")));
        }
        if n == 0 {
            return Err(Error::invalid("n must be >= 1"));
        }
        if !linalg::is_finite_vec(&beta) || !gram.is_finite() {
            return Err(Error::invalid("beta and Gram matrix must be finite"));
        }
        let sigma = gram.mul_vec(&beta);
        let sigma_sq = dot(&sigma, &sigma);
        let sigma_quad = gram.quad_form(&sigma);
        let lambda = if sigma_sq > 0.0 { sigma_quad / sigma_sq } else { 0.0 };
        let j0: Vec<usize> = (0..sigma.len()).filter(|&j| sigma[j] != 0.0).collect();
        let sub = gram.principal_submatrix(&j0);
        Ok(PopulationContext {
            s: j0.len(),
            rho: linalg::rho(&gram)?,
            trace: linalg::trace(&gram),
            trace_sq: square_sum(&gram),
            rho_j0: linalg::rho(&sub)?,
            trace_j0: linalg::trace(&sub),
            trace_sq_j0: square_sum(&sub),
            beta,
            gram,
            tau,
            n,
            sigma,
            lambda,
            sigma_sq,
            sigma_quad,
            j0,
        })
    }

    pub fn p(&self) -> usize {
        self.gram.dim()
    }

    /// `τ²/n`
    pub fn noise_level(&self) -> f64 {
        self.tau * self.tau / self.n as f64
    }
}

/// `Tr(A²)` as the sum of squared entries.
fn square_sum(a: &SymMatrix) -> f64 {
    let f = a.frobenius_norm();
    f * f
}

/// Which bound is being evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Theorem {
    /// Thresholded single-component bound.
    T31,
    /// sPLS bound in terms of `λ`.
    T41,
    /// sPLS bound under the restricted-eigenvalue surrogate `φ`.
    C41,
    /// Alternative sparse estimator under the same surrogate.
    T42,
}

impl Theorem {
    pub fn as_str(self) -> &'static str {
        match self {
            Theorem::T31 => "T31",
            Theorem::T41 => "T41",
            Theorem::C41 => "C41",
            Theorem::T42 => "T42",
        }
    }

    pub fn needs_phi(self) -> bool {
        matches!(self, Theorem::C41 | Theorem::T42)
    }
}

impl fmt::Display for Theorem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Theorem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "T31" => Ok(Theorem::T31),
            "T41" => Ok(Theorem::T41),
            "C41" => Ok(Theorem::C41),
            "T42" => Ok(Theorem::T42),
            other => Err(Error::invalid(format!(
                "unknown theorem tag '{other}' (expected T31, T41, C41 or T42)"
            ))),
        }
    }
}

impl Serialize for Theorem {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

/// How the leading constant of the variance term is obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConstantMode {
    /// Constants assembled from the explicit proof inequalities. The residual
    /// multiplies the sparse constants only.
    Proof { residual: f64 },
    /// A user-supplied (typically fitted) constant.
    Calibrated(f64),
}

impl ConstantMode {
    pub const PROOF: ConstantMode = ConstantMode::Proof { residual: 1.0 };

    fn validate(self) -> Result<()> {
        let v = match self {
            ConstantMode::Proof { residual } => residual,
            ConstantMode::Calibrated(c) => c,
        };
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::invalid(format!("constant must be finite and > 0, got {v}")));
        }
        Ok(())
    }
}

impl fmt::Display for ConstantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConstantMode::Proof { .. } => f.write_str("proof"),
            ConstantMode::Calibrated(c) => write!(f, "calibrated({c})"),
        }
    }
}

impl FromStr for ConstantMode {
    type Err = Error;

    /// Accepts `proof` or `calibrated(c)`.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t == "proof" {
            return Ok(ConstantMode::PROOF);
        }
        if let Some(inner) = t.strip_prefix("calibrated(").and_then(|r| r.strip_suffix(')')) {
            let c: f64 = inner
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad calibrated constant '{inner}'")))?;
            let mode = ConstantMode::Calibrated(c);
            mode.validate()?;
            return Ok(mode);
        }
        Err(Error::invalid(format!(
            "unknown constant mode '{t}' (expected proof or calibrated(c))"
        )))
    }
}

impl Serialize for ConstantMode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub theorem: Theorem,
    pub constant_mode: ConstantMode,
    /// Leading constant actually used.
    pub constant: f64,
    pub bias: f64,
    pub variance: f64,
    pub rhs: f64,
    /// Set when `λ = 0` and the bound degenerates to `+∞`.
    pub degenerate: bool,
    /// μ-variant the sparse bound refers to.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<SparseVariant>,
    pub event_flags: BTreeMap<String, bool>,
}

impl BoundReport {
    fn assemble(
        theorem: Theorem,
        constant_mode: ConstantMode,
        constant: f64,
        bias: f64,
        variance: f64,
        degenerate: bool,
    ) -> Self {
        let mut event_flags = BTreeMap::new();
        event_flags.insert("lambda_positive".to_string(), !degenerate);
        BoundReport {
            theorem,
            constant_mode,
            constant,
            bias,
            variance,
            rhs: bias + variance,
            degenerate,
            variant: None,
            event_flags,
        }
    }
}

/// `β̄ = (σᵀσ/σᵀΣσ) σ`, the minimizer of `‖X(β − v)‖` over `v ∈ span(σ)`.
pub fn beta_bar(ctx: &PopulationContext) -> Vec<f64> {
    if ctx.sigma_quad > 0.0 {
        linalg::scaled(ctx.sigma_sq / ctx.sigma_quad, &ctx.sigma)
    } else {
        vec![0.0; ctx.sigma.len()]
    }
}

/// `(2/n) ‖X(β − β̄)‖²`.
pub fn bias_term(ctx: &PopulationContext, x: &Matrix) -> Result<f64> {
    if x.cols() != ctx.p() {
        return Err(Error::invalid(format!(
            "design has {} columns, context has p = {}",
            x.cols(),
            ctx.p()
        )));
    }
    let diff = linalg::sub(&ctx.beta, &beta_bar(ctx));
    let fitted = x.mul_vec(&diff)?;
    Ok(2.0 / x.rows() as f64 * dot(&fitted, &fitted))
}

fn check_x(x: f64) -> Result<()> {
    if !(x >= 0.0) || !x.is_finite() {
        return Err(Error::invalid(format!("deviation level x must be finite and >= 0, got {x}")));
    }
    Ok(())
}

/// `(T₁, T₂, T₃)` at level `x`.
pub fn deviation_terms(x: f64, ctx: &PopulationContext) -> Result<(f64, f64, f64)> {
    check_x(x)?;
    let g = g_func(x)?;
    let v = ctx.noise_level();
    let dev = 2.0 * 2f64.sqrt() * v.sqrt() * x.sqrt();
    let t1 = g * v * ctx.trace + dev * ctx.rho.sqrt() * ctx.sigma_sq.sqrt();
    let t2 = g * v * ctx.trace_sq + dev * ctx.rho * ctx.sigma_quad.sqrt();
    let t3 = g * v * ctx.trace_sq;
    Ok((t1, t2, t3))
}

/// `(T₀₁, T₀₂, T₀₃)` at level `x`, built on `Σ_{J₀}`.
pub fn sparse_deviation_terms(x: f64, ctx: &PopulationContext) -> Result<(f64, f64, f64)> {
    check_x(x)?;
    let g = g_func(x)?;
    let v = ctx.noise_level();
    let dev = 2.0 * 2f64.sqrt() * v.sqrt() * x.sqrt();
    let t01 = g * v * ctx.trace_j0 + dev * ctx.rho_j0.sqrt() * ctx.sigma_sq.sqrt();
    let t02 = g * v * ctx.trace_j0;
    let t03 = g * v * ctx.trace_sq_j0;
    Ok((t01, t02, t03))
}

/// Upper and lower deviation thresholds for `UᵀA^sU` with `U ~ N(m, tA)`.
pub fn quad_form_deviation_thresholds(
    a: &SymMatrix,
    m: &[f64],
    t: f64,
    s: u32,
    x: f64,
) -> Result<(f64, f64)> {
    if s > 1 {
        return Err(Error::Unsupported(format!(
            "quadratic-form thresholds are only available for s in {{0, 1}}, got {s}"
        )));
    }
    if m.len() != a.dim() {
        return Err(Error::invalid("mean vector and matrix dimensions differ"));
    }
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::invalid(format!("t must be finite and >= 0, got {t}")));
    }
    check_x(x)?;
    let rho = linalg::rho(a)?;
    let a2 = a.square();
    // Tr(A^{s+1}), Tr(A^{2(s+1)}) and mᵀA^s m
    let (tr_1, tr_2, m_form) = if s == 0 {
        (linalg::trace(a), linalg::trace(&a2), dot(m, m))
    } else {
        (linalg::trace(&a2), square_sum(&a2), a.quad_form(m))
    };
    let rho_pow = rho.powi(s as i32 + 1);
    let theta = t * t * tr_2 + 2.0 * t * rho_pow * m_form;
    let mean = m_form + t * tr_1;
    let spread = 2.0 * (theta * x).sqrt();
    Ok((mean + spread + 2.0 * t * rho_pow * x, mean - spread))
}

/// Proof constant `C'_{δ,r}` of the single-component bound.
pub fn theorem31_proof_constant(delta: f64, r: f64) -> Result<f64> {
    check_delta(delta, 1.0)?;
    let x = x_delta(delta);
    let g = g_func(x)?;
    let t = 2.0 * g / r + g + 2.0 * x;
    let h = 2.0 * (t + g + 4.0 * x);
    let c = c_delta_r(x, g, r)?;
    let k = (g / (r * h)).max(1.0);
    // coefficient of ρ(Σ)Tr(Σ)/λ²
    let a = 2.0 * g / r + 4.0 * c * c + 16.0 * c * r * g * k + 128.0 * c * x;
    // coefficient of Tr(Σ)/λ
    let b = 16.0 * r * g * k + 128.0 * x;
    Ok(a + b)
}

/// Explicit pieces of the sparse proof constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SparseProofConstants {
    pub c_i: f64,
    pub c_ii: f64,
    pub c_iii: f64,
    /// `d_{δ,p}` in proof form.
    pub d: f64,
    pub residual: f64,
    /// `residual · (4F²C_I + 8F²C_II + 8C_III)`
    pub total: f64,
}

/// Assembles the sparse proof constant. `variant` selects the log term used
/// in the μ substitutions (`ln(2p/δ)` for sPLS, `ln(p/δ)` for the alternative).
pub fn sparse_proof_constants(
    delta: f64,
    p: usize,
    variant: SparseVariant,
    residual: f64,
) -> Result<SparseProofConstants> {
    check_delta(delta, 0.5)?;
    if p == 0 {
        return Err(Error::invalid("p must be >= 1"));
    }
    let lp = (p as f64 / delta).ln();
    let l2 = variant.log_term(p, delta);
    let g0 = g_func(x0_delta(delta))?;
    let d = d_delta_p(delta, p, DMode::Proof)?;
    let c_i = (8.0 * g0 + 184.0 * l2) / lp;
    let c_ii = (2.0 * (128.0 * g0 * g0 + 2.0 * 224.0 * 224.0) * l2 * l2 / d + 8.0 * c_i * lp) / lp;
    let c_iii = (33.0 * g0 * g0 / d + 2.0 * 36.0 * 36.0 * l2 * l2 / d + 20.0 * g0 + 144.0 * l2) / lp;
    let total = residual * (4.0 * F * F * c_i + 8.0 * F * F * c_ii + 8.0 * c_iii);
    Ok(SparseProofConstants {
        c_i,
        c_ii,
        c_iii,
        d,
        residual,
        total,
    })
}

fn resolve(mode: ConstantMode, proof: impl FnOnce(f64) -> Result<f64>) -> Result<f64> {
    mode.validate()?;
    match mode {
        ConstantMode::Proof { residual } => proof(residual),
        ConstantMode::Calibrated(c) => Ok(c),
    }
}

/// `max(Tr(Σ)/λ, ρ(Σ)Tr(Σ)/λ²)`, infinite when `λ = 0`.
pub fn theorem31_shape(ctx: &PopulationContext) -> f64 {
    if ctx.lambda == 0.0 {
        return f64::INFINITY;
    }
    let l = ctx.lambda;
    ctx.noise_level() * (ctx.trace / l).max(ctx.rho * ctx.trace / (l * l))
}

/// Variance factor of the `λ`-form sparse bound, without the constant.
pub fn theorem41_shape(ctx: &PopulationContext, delta: f64) -> f64 {
    if ctx.lambda == 0.0 {
        return f64::INFINITY;
    }
    let l = ctx.lambda;
    let lp = (ctx.p() as f64 / delta).ln();
    ctx.noise_level() * ctx.s as f64 * (ctx.rho_j0 / (l * l)).max(1.0 / l) * lp
}

/// Variance factor of the `φ`-form sparse bounds, without the constant.
pub fn phi_shape(ctx: &PopulationContext, delta: f64, phi: f64) -> f64 {
    let lp = (ctx.p() as f64 / delta).ln();
    ctx.noise_level() * ctx.s as f64 * (phi * phi * ctx.rho_j0).max(phi) * lp
}

fn variance(constant: f64, shape: f64) -> f64 {
    if shape.is_infinite() {
        f64::INFINITY
    } else {
        constant * shape
    }
}

pub fn theorem31_rhs(
    ctx: &PopulationContext,
    x: &Matrix,
    delta: f64,
    mode: ConstantMode,
) -> Result<BoundReport> {
    check_delta(delta, 1.0)?;
    let constant = resolve(mode, |_| theorem31_proof_constant(delta, DEFAULT_R))?;
    let bias = bias_term(ctx, x)?;
    let shape = theorem31_shape(ctx);
    Ok(BoundReport::assemble(
        Theorem::T31,
        mode,
        constant,
        bias,
        variance(constant, shape),
        ctx.lambda == 0.0,
    ))
}

pub fn theorem41_rhs(
    ctx: &PopulationContext,
    x: &Matrix,
    delta: f64,
    mode: ConstantMode,
) -> Result<BoundReport> {
    check_delta(delta, 0.5)?;
    let constant = resolve(mode, |res| {
        Ok(sparse_proof_constants(delta, ctx.p(), SparseVariant::Spls, res)?.total)
    })?;
    let bias = bias_term(ctx, x)?;
    let shape = theorem41_shape(ctx, delta);
    let mut report = BoundReport::assemble(
        Theorem::T41,
        mode,
        constant,
        bias,
        variance(constant, shape),
        ctx.lambda == 0.0,
    );
    report.variant = Some(SparseVariant::Spls);
    Ok(report)
}

fn phi_rhs(
    theorem: Theorem,
    variant: SparseVariant,
    ctx: &PopulationContext,
    x: &Matrix,
    delta: f64,
    phi: f64,
    mode: ConstantMode,
) -> Result<BoundReport> {
    if !(phi > 0.0) || !phi.is_finite() {
        return Err(Error::invalid(format!("phi must be finite and > 0, got {phi}")));
    }
    check_delta(delta, 0.5)?;
    let constant = resolve(mode, |res| {
        Ok(sparse_proof_constants(delta, ctx.p(), variant, res)?.total)
    })?;
    let bias = bias_term(ctx, x)?;
    let mut report = BoundReport::assemble(
        theorem,
        mode,
        constant,
        bias,
        constant * phi_shape(ctx, delta, phi),
        false,
    );
    report.variant = Some(variant);
    report
        .event_flags
        .insert("lambda_phi_above_one".to_string(), ctx.lambda * phi >= 1.0 - 1e-12);
    Ok(report)
}

pub fn cor41_rhs(
    ctx: &PopulationContext,
    x: &Matrix,
    delta: f64,
    phi: f64,
    mode: ConstantMode,
) -> Result<BoundReport> {
    phi_rhs(Theorem::C41, SparseVariant::Spls, ctx, x, delta, phi, mode)
}

pub fn theorem42_rhs(
    ctx: &PopulationContext,
    x: &Matrix,
    delta: f64,
    phi: f64,
    mode: ConstantMode,
) -> Result<BoundReport> {
    phi_rhs(Theorem::T42, SparseVariant::Alt, ctx, x, delta, phi, mode)
}

/// Dispatches on the theorem tag. `phi` is required for `C41` and `T42`.
pub fn theorem_rhs(
    theorem: Theorem,
    ctx: &PopulationContext,
    x: &Matrix,
    delta: f64,
    phi: Option<f64>,
    mode: ConstantMode,
) -> Result<BoundReport> {
    let need_phi = || {
        phi.ok_or_else(|| Error::invalid(format!("theorem {theorem} requires phi")))
    };
    match theorem {
        Theorem::T31 => theorem31_rhs(ctx, x, delta, mode),
        Theorem::T41 => theorem41_rhs(ctx, x, delta, mode),
        Theorem::C41 => cor41_rhs(ctx, x, delta, need_phi()?, mode),
        Theorem::T42 => theorem42_rhs(ctx, x, delta, need_phi()?, mode),
    }
}

/// The four `λ`-type ratios. Zero denominators give `+∞` and set the flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LambdaQuantities {
    pub lambda: f64,
    /// `σ̂ᵀσ̂/σ̂ᵀΣσ̂`
    pub lambda_hat_inv: f64,
    /// `σ̃ᵀσ̂/σ̃ᵀΣσ̃`
    pub lambda_tilde_inv: f64,
    /// `σ̃ᵀσ̃/σ̃ᵀΣσ̃`
    pub lambda_tilde_star_inv: f64,
    pub lambda_zero: bool,
    pub hat_degenerate: bool,
    pub tilde_degenerate: bool,
}

pub fn lambda_quantities(
    sigma_hat: &[f64],
    sigma_tilde: &[f64],
    gram: &SymMatrix,
    ctx: &PopulationContext,
) -> LambdaQuantities {
    let ratio = |num: f64, den: f64| if den == 0.0 { f64::INFINITY } else { num / den };
    let hat_quad = gram.quad_form(sigma_hat);
    let tilde_quad = gram.quad_form(sigma_tilde);
    LambdaQuantities {
        lambda: ctx.lambda,
        lambda_hat_inv: ratio(dot(sigma_hat, sigma_hat), hat_quad),
        lambda_tilde_inv: ratio(dot(sigma_tilde, sigma_hat), tilde_quad),
        lambda_tilde_star_inv: ratio(dot(sigma_tilde, sigma_tilde), tilde_quad),
        lambda_zero: ctx.sigma_sq == 0.0,
        hat_degenerate: hat_quad == 0.0,
        tilde_degenerate: tilde_quad == 0.0,
    }
}

/// Dense deviation events `(A₁, A₂, A₃)` for one draw of `σ̂`.
/// Relative slack on event and coverage comparisons. Simulated designs match
/// Σ only to `GRAM_FIDELITY_TOL`, so a noiseless replicate can miss a zero
/// threshold by rounding alone.
pub const ROUNDOFF_REL: f64 = 1e-10;

pub fn dense_events(sigma_hat: &[f64], ctx: &PopulationContext, x: f64) -> Result<[bool; 3]> {
    let (t1, t2, t3) = deviation_terms(x, ctx)?;
    let diff = linalg::sub(sigma_hat, &ctx.sigma);
    let a1 = (dot(sigma_hat, sigma_hat) - ctx.sigma_sq).abs() <= t1 + ROUNDOFF_REL * ctx.sigma_sq;
    let a2 = (ctx.gram.quad_form(sigma_hat) - ctx.sigma_quad).abs() <= t2 + ROUNDOFF_REL * ctx.sigma_quad;
    let a3 = ctx.gram.quad_form(&diff) <= t3 + ROUNDOFF_REL * ctx.sigma_quad;
    Ok([a1, a2, a3])
}

/// Sparse deviation events `(B₁, B₂, B₃)`, all restricted to `J₀`.
pub fn sparse_events(sigma_hat: &[f64], ctx: &PopulationContext, x: f64) -> Result<[bool; 3]> {
    let (t01, t02, t03) = sparse_deviation_terms(x, ctx)?;
    let mut hat_j0 = vec![0.0; sigma_hat.len()];
    let mut diff_j0 = vec![0.0; sigma_hat.len()];
    for &j in &ctx.j0 {
        hat_j0[j] = sigma_hat[j];
        diff_j0[j] = sigma_hat[j] - ctx.sigma[j];
    }
    let b1 = (dot(&hat_j0, &hat_j0) - ctx.sigma_sq).abs() <= t01 + ROUNDOFF_REL * ctx.sigma_sq;
    let b2 = dot(&diff_j0, &diff_j0) <= t02 + ROUNDOFF_REL * ctx.sigma_sq;
    let b3 = ctx.gram.quad_form(&diff_j0) <= t03 + ROUNDOFF_REL * ctx.sigma_quad;
    Ok([b1, b2, b3])
}

/// `max_j |σ̂_j − σ_j| ≤ μ/2`.
pub fn m_event(sigma_hat: &[f64], ctx: &PopulationContext, mu: f64) -> bool {
    let slack = ROUNDOFF_REL * ctx.sigma.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
    sigma_hat
        .iter()
        .zip(&ctx.sigma)
        .all(|(a, b)| (a - b).abs() <= mu / 2.0 + slack)
}

/// Signal-strength requirement `σᵀΣσ > d_{δ,p}(τ²/n)ρ(Σ_{J₀})Tr(Σ_{J₀})`.
pub fn signal_condition_holds(ctx: &PopulationContext, delta: f64, mode: DMode) -> Result<bool> {
    let d = d_delta_p(delta, ctx.p(), mode)?;
    Ok(ctx.sigma_quad > d * ctx.noise_level() * ctx.rho_j0 * ctx.trace_j0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_psd(rng: &mut ChaCha8Rng, p: usize) -> SymMatrix {
        let b = Matrix::from_fn(p + 3, p, |_, _| rng.random_range(-1.0..1.0));
        linalg::gram(&b, p + 3).unwrap()
    }

    fn random_ctx(seed: u64, p: usize) -> (PopulationContext, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3 * p;
        let x = Matrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let gram = linalg::gram(&x, n).unwrap();
        let beta: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
        (PopulationContext::new(beta, gram, 0.7, n).unwrap(), x)
    }

    #[test]
    fn context_invariants() {
        for seed in 0..20 {
            let (ctx, _) = random_ctx(seed, 6);
            let recomputed = ctx.gram.mul_vec(&ctx.beta);
            for (a, b) in recomputed.iter().zip(&ctx.sigma) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!(ctx.lambda >= 0.0 && ctx.lambda <= ctx.rho + 1e-10);
        }
    }

    #[test]
    fn bias_vanishes_on_span_and_zero() {
        let gram = SymMatrix::diagonal(&[2.0, 2.0, 1.0]);
        let x = Matrix::from_fn(3, 3, |i, j| if i == j { gram.get(i, i).sqrt() * 3f64.sqrt() } else { 0.0 });
        let ctx = PopulationContext::new(vec![1.0, -1.0, 0.0], gram.clone(), 1.0, 3).unwrap();
        assert!(bias_term(&ctx, &x).unwrap() < 1e-20);
        let ctx = PopulationContext::new(vec![0.0; 3], gram, 1.0, 3).unwrap();
        assert_eq!(bias_term(&ctx, &x).unwrap(), 0.0);
    }

    #[test]
    fn bias_matches_golden_section() {
        for seed in 0..10 {
            let (ctx, x) = random_ctx(100 + seed, 5);
            let n = x.rows() as f64;
            let obj = |c: f64| {
                let v = linalg::sub(&ctx.beta, &linalg::scaled(c, &ctx.sigma));
                let f = x.mul_vec(&v).unwrap();
                2.0 / n * dot(&f, &f)
            };
            let (mut lo, mut hi) = (-100.0, 100.0);
            let ratio = (5f64.sqrt() - 1.0) / 2.0;
            for _ in 0..200 {
                let a = hi - ratio * (hi - lo);
                let b = lo + ratio * (hi - lo);
                if obj(a) < obj(b) {
                    hi = b;
                } else {
                    lo = a;
                }
            }
            let oracle = obj(0.5 * (lo + hi));
            assert!((bias_term(&ctx, &x).unwrap() - oracle).abs() < 1e-8);
        }
    }

    #[test]
    fn deviation_term_examples() {
        let gram = SymMatrix::diagonal(&[1.0, 2.0]);
        let ctx = PopulationContext::new(vec![0.0, 0.0], gram.clone(), 0.5, 4).unwrap();
        let (t1, t2, t3) = deviation_terms(0.0, &ctx).unwrap();
        assert_relative_eq!(t1, 0.0625 * 3.0, max_relative = 1e-15);
        assert_relative_eq!(t2, 0.0625 * 5.0, max_relative = 1e-15);
        assert_eq!(t2, t3);

        let ctx = PopulationContext::new(vec![1.0, 1.0], gram, 0.0, 4).unwrap();
        assert_eq!(deviation_terms(2.0, &ctx).unwrap(), (0.0, 0.0, 0.0));
        assert!(deviation_terms(-1.0, &ctx).is_err());
    }

    #[test]
    fn deviation_terms_scalar_reevaluation() {
        let (ctx, _) = random_ctx(7, 5);
        let x = 10f64.ln();
        let (t1, t2, t3) = deviation_terms(x, &ctx).unwrap();
        let v = ctx.tau * ctx.tau / ctx.n as f64;
        let g = 1.0 + 2.0 * x + 2.0 * x.sqrt();
        let tr = (0..5).map(|i| ctx.gram.get(i, i)).sum::<f64>();
        let mut tr2 = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                tr2 += ctx.gram.get(i, j) * ctx.gram.get(j, i);
            }
        }
        let sigma_norm = ctx.sigma.iter().map(|v| v * v).sum::<f64>().sqrt();
        let root = linalg::sym_sqrt(&ctx.gram).unwrap();
        let half = root.mul_vec(&ctx.sigma);
        let half_norm = half.iter().map(|v| v * v).sum::<f64>().sqrt();
        let e1 = g * v * tr + 2.0 * 2f64.sqrt() * v.sqrt() * ctx.rho.sqrt() * x.sqrt() * sigma_norm;
        let e2 = g * v * tr2 + 2.0 * 2f64.sqrt() * v.sqrt() * ctx.rho * x.sqrt() * half_norm;
        assert_relative_eq!(t1, e1, max_relative = 1e-12);
        assert_relative_eq!(t2, e2, max_relative = 1e-12);
        assert_relative_eq!(t3, g * v * tr2, max_relative = 1e-12);
    }

    #[test]
    fn sparse_terms_examples() {
        let gram = SymMatrix::diagonal(&[1.0, 3.0, 2.0]);
        let ctx = PopulationContext::new(vec![0.0; 3], gram.clone(), 1.0, 10).unwrap();
        assert_eq!(sparse_deviation_terms(1.0, &ctx).unwrap(), (0.0, 0.0, 0.0));

        let ctx = PopulationContext::new(vec![1.0, 1.0, 1.0], gram.clone(), 1.0, 10).unwrap();
        let x = 2.0;
        let (t01, t02, t03) = sparse_deviation_terms(x, &ctx).unwrap();
        let (t1, _, t3) = deviation_terms(x, &ctx).unwrap();
        assert_relative_eq!(t01, t1, max_relative = 1e-14);
        assert_relative_eq!(t03, t3, max_relative = 1e-14);
        let g = 1.0 + 2.0 * x + 2.0 * x.sqrt();
        assert_relative_eq!(t02, g * 0.1 * 6.0, max_relative = 1e-14);

        let ctx = PopulationContext::new(vec![1.0, 1.0, 1.0], gram, 0.0, 10).unwrap();
        assert_eq!(sparse_deviation_terms(x, &ctx).unwrap(), (0.0, 0.0, 0.0));
    }

    #[test]
    fn laurent_reductions() {
        let a = SymMatrix::diagonal(&[0.5, 2.0, 1.0]);
        let m = [1.0, -1.0, 0.5];
        let (u, l) = quad_form_deviation_thresholds(&a, &m, 0.0, 1, 3.0).unwrap();
        assert_relative_eq!(u, a.quad_form(&m), max_relative = 1e-15);
        assert_eq!(u, l);

        let d = 7.0;
        let (t, x) = (1.3, 2.0);
        let (u, l) =
            quad_form_deviation_thresholds(&SymMatrix::identity(7), &[0.0; 7], t, 0, x).unwrap();
        assert_relative_eq!(u, t * d + 2.0 * t * (d * x).sqrt() + 2.0 * t * x, max_relative = 1e-14);
        assert_relative_eq!(l, t * d - 2.0 * t * (d * x).sqrt(), max_relative = 1e-14);

        assert!(matches!(
            quad_form_deviation_thresholds(&a, &m, 1.0, 2, 1.0),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn laurent_tails_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let a = random_psd(&mut rng, 5);
        let m: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let root = linalg::sym_sqrt(&a).unwrap();
        let x = 20f64.ln();
        let (upper, lower) = quad_form_deviation_thresholds(&a, &m, 1.0, 1, x).unwrap();
        let draws = 100_000;
        let (mut over, mut under) = (0usize, 0usize);
        for _ in 0..draws {
            let z: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
            let mut u = root.mul_vec(&z);
            linalg::axpy(1.0, &m, &mut u);
            let q = a.quad_form(&u);
            over += (q > upper) as usize;
            under += (q < lower) as usize;
        }
        let pr = (-x).exp();
        let tol = pr + 3.0 * (pr * (1.0 - pr) / draws as f64).sqrt();
        assert!((over as f64 / draws as f64) <= tol);
        assert!((under as f64 / draws as f64) <= tol);
    }

    #[test]
    fn proof_constant_matches_scalar_assembly() {
        let delta: f64 = 0.1;
        let r = 0.5;
        let x = (5.0 / delta).ln();
        let g = 1.0 + 2.0 * x + 2.0 * x.sqrt();
        let t = 2.0 * g / r + g + 2.0 * x;
        let h = 2.0 * (t + g + 4.0 * x);
        let c = (1.0 + r + 2.0 * (2.0 * r * x / g).sqrt()) / (1.0 + r - ((1.0 + r) / 2.0 + 2.0 * r / (1.0 + r)));
        let k = f64::max(1.0, g / (r * h));
        let expected = 2.0 * g / r
            + 4.0 * c * c
            + 16.0 * c * r * g * k
            + 128.0 * c * x
            + 16.0 * r * g * k
            + 128.0 * x;
        assert_relative_eq!(theorem31_proof_constant(delta, r).unwrap(), expected, max_relative = 1e-14);
    }

    #[test]
    fn theorem31_identity_and_rank_one_regimes() {
        let p = 20;
        let n = 100;
        let beta: Vec<f64> = (0..p).map(|j| if j == 0 { 3.0 } else { 0.0 }).collect();
        let x = Matrix::from_fn(n, p, |i, j| if i % p == j { (p as f64).sqrt() } else { 0.0 });
        let ctx = PopulationContext::new(beta.clone(), SymMatrix::identity(p), 1.0, n).unwrap();
        assert_relative_eq!(ctx.lambda, 1.0, max_relative = 1e-15);
        let dense = theorem31_rhs(&ctx, &x, 0.1, ConstantMode::PROOF).unwrap();
        let c = theorem31_proof_constant(0.1, 0.5).unwrap();
        assert_relative_eq!(dense.variance, c * p as f64 / n as f64, max_relative = 1e-12);
        assert_eq!(dense.rhs, dense.bias + dense.variance);

        let rank_one = SymMatrix::from_fn(p, |i, j| if i == 0 && j == 0 { 1.0 } else { 0.0 });
        let ctx = PopulationContext::new(beta, rank_one, 1.0, n).unwrap();
        let single = theorem31_rhs(&ctx, &x, 0.1, ConstantMode::PROOF).unwrap();
        assert_relative_eq!(single.variance, c / n as f64, max_relative = 1e-12);
    }

    #[test]
    fn theorem31_noiseless_span_is_zero() {
        let gram = SymMatrix::diagonal(&[1.0, 4.0]);
        let x = Matrix::from_fn(2, 2, |i, j| if i == j { (2.0 * gram.get(i, i)).sqrt() } else { 0.0 });
        let ctx = PopulationContext::new(vec![0.0, 1.0], gram, 0.0, 2).unwrap();
        let report = theorem31_rhs(&ctx, &x, 0.2, ConstantMode::PROOF).unwrap();
        assert!(report.rhs.abs() < 1e-14);
    }

    #[test]
    fn zero_lambda_gives_sentinel() {
        let ctx = PopulationContext::new(vec![0.0; 3], SymMatrix::identity(3), 1.0, 3).unwrap();
        let report = theorem31_rhs(&ctx, &Matrix::identity(3), 0.1, ConstantMode::PROOF).unwrap();
        assert!(report.degenerate && report.rhs.is_infinite());
        assert!(!report.event_flags["lambda_positive"]);
    }

    #[test]
    fn theorem31_homogeneity() {
        let (ctx, x) = random_ctx(9, 4);
        let c = 3.5;
        let scaled = PopulationContext::new(ctx.beta.clone(), ctx.gram.scaled(c), ctx.tau, ctx.n).unwrap();
        assert_relative_eq!(scaled.lambda, c * ctx.lambda, max_relative = 1e-12);
        let v = ctx.noise_level();
        let first = |k: &PopulationContext| v * k.trace / k.lambda;
        let second = |k: &PopulationContext| v * k.rho * k.trace / (k.lambda * k.lambda);
        assert_relative_eq!(first(&scaled), first(&ctx), max_relative = 1e-12);
        // ρ(cΣ)Tr(cΣ) = c²ρTr(Σ) and λ(c)² = c²λ², so this argument is unchanged as well
        assert_relative_eq!(second(&scaled), second(&ctx), max_relative = 1e-12);
        let k = theorem31_proof_constant(0.05, 0.5).unwrap();
        let report = theorem31_rhs(&scaled, &x, 0.05, ConstantMode::PROOF).unwrap();
        assert_relative_eq!(
            report.variance,
            k * first(&scaled).max(second(&scaled)),
            max_relative = 1e-12
        );
    }

    fn sparse_ctx(p: usize, tau: f64, n: usize) -> (PopulationContext, Matrix) {
        let beta: Vec<f64> = (0..p).map(|j| if j < 3 { 2.0 + j as f64 } else { 0.0 }).collect();
        let x = Matrix::from_fn(n, p, |i, j| if i % p == j { (p as f64).sqrt() } else { 0.0 });
        let ctx = PopulationContext::new(beta, linalg::gram(&x, n).unwrap(), tau, n).unwrap();
        (ctx, x)
    }

    #[test]
    fn theorem41_scalar_reevaluation() {
        let (ctx, x) = sparse_ctx(50, 1.0, 200);
        let delta: f64 = 0.1;
        let report = theorem41_rhs(&ctx, &x, delta, ConstantMode::Calibrated(2.5)).unwrap();
        let lam = ctx.lambda;
        let expected = 2.5 * (1.0 / 200.0) * 3.0 * f64::max(1.0 / (lam * lam), 1.0 / lam) * (50.0 / delta).ln();
        assert_relative_eq!(report.variance, expected, max_relative = 1e-12);
        assert_eq!(report.variant, Some(SparseVariant::Spls));

        let (ctx, x) = sparse_ctx(50, 0.0, 200);
        assert_eq!(theorem41_rhs(&ctx, &x, delta, ConstantMode::PROOF).unwrap().variance, 0.0);
        assert!(theorem41_rhs(&ctx, &x, 0.5, ConstantMode::PROOF).is_err());
    }

    #[test]
    fn theorem41_log_ratio_under_doubling_p() {
        let delta: f64 = 0.1;
        let (small, xs) = sparse_ctx(25, 1.0, 100);
        let (large, xl) = sparse_ctx(50, 1.0, 100);
        let mode = ConstantMode::Calibrated(1.0);
        let a = theorem41_rhs(&small, &xs, delta, mode).unwrap().variance;
        let b = theorem41_rhs(&large, &xl, delta, mode).unwrap().variance;
        let expected = (50.0 / delta).ln() / (25.0 / delta).ln();
        assert!((b / a - expected).abs() < 1e-12);
    }

    #[test]
    fn phi_forms() {
        let (ctx, x) = sparse_ctx(10, 1.0, 40);
        let delta: f64 = 0.2;
        let r = cor41_rhs(&ctx, &x, delta, 1.0, ConstantMode::Calibrated(1.0)).unwrap();
        let expected = (1.0 / 40.0) * 3.0 * (10.0 / delta).ln();
        assert_relative_eq!(r.variance, expected, max_relative = 1e-12);
        assert!(r.event_flags["lambda_phi_above_one"]);

        let phi = 1.7;
        let c = cor41_rhs(&ctx, &x, delta, phi, ConstantMode::Calibrated(3.0)).unwrap();
        let t = theorem42_rhs(&ctx, &x, delta, phi, ConstantMode::Calibrated(3.0)).unwrap();
        assert_eq!(c.variance, t.variance);
        assert_eq!(t.variant, Some(SparseVariant::Alt));
        let expected = 3.0 / 40.0 * 3.0 * f64::max(phi * phi * ctx.rho_j0, phi) * (10.0 / delta).ln();
        assert_relative_eq!(t.variance, expected, max_relative = 1e-12);

        assert!(cor41_rhs(&ctx, &x, delta, 0.0, ConstantMode::PROOF).is_err());
        assert!(theorem42_rhs(&ctx, &x, delta, -1.0, ConstantMode::PROOF).is_err());
        let (quiet, xq) = sparse_ctx(10, 0.0, 40);
        assert_eq!(theorem42_rhs(&quiet, &xq, delta, phi, ConstantMode::PROOF).unwrap().variance, 0.0);
    }

    #[test]
    fn sparse_proof_constant_assembly() {
        let delta: f64 = 0.1;
        let p = 50;
        let k = sparse_proof_constants(delta, p, SparseVariant::Spls, 1.0).unwrap();
        let lp = (p as f64 / delta).ln();
        let l2 = (2.0 * p as f64 / delta).ln();
        let x0 = (10.0 / delta).ln();
        let g0 = 1.0 + 2.0 * x0 + 2.0 * x0.sqrt();
        let d = 4.0 * g0 + 192.0 * l2;
        let ci = (8.0 * g0 + 184.0 * l2) / lp;
        assert_relative_eq!(k.c_i, ci, max_relative = 1e-14);
        assert_relative_eq!(k.d, d, max_relative = 1e-14);
        assert_relative_eq!(k.total, 4.0 * F * F * k.c_i + 8.0 * F * F * k.c_ii + 8.0 * k.c_iii, max_relative = 1e-14);
        let doubled = sparse_proof_constants(delta, p, SparseVariant::Spls, 2.0).unwrap();
        assert_relative_eq!(doubled.total, 2.0 * k.total, max_relative = 1e-14);
        let alt = sparse_proof_constants(delta, p, SparseVariant::Alt, 1.0).unwrap();
        assert!(alt.total < k.total);
    }

    #[test]
    fn lambda_quantities_examples() {
        let ctx = PopulationContext::new(vec![1.0, 2.0], SymMatrix::identity(2), 1.0, 5).unwrap();
        let v = [1.0, 2.0];
        let q = lambda_quantities(&v, &v, &SymMatrix::identity(2), &ctx);
        assert_eq!((q.lambda, q.lambda_hat_inv, q.lambda_tilde_inv, q.lambda_tilde_star_inv), (1.0, 1.0, 1.0, 1.0));
        let q = lambda_quantities(&v, &[0.0, 0.0], &SymMatrix::identity(2), &ctx);
        assert!(q.tilde_degenerate && q.lambda_tilde_inv.is_infinite());

        let (ctx, _) = random_ctx(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q = lambda_quantities(&a, &b, &ctx.gram, &ctx);
        let quad = |v: &[f64]| {
            let mut s = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    s += v[i] * ctx.gram.get(i, j) * v[j];
                }
            }
            s
        };
        assert_relative_eq!(q.lambda_hat_inv, dot(&a, &a) / quad(&a), max_relative = 1e-12);
        assert_relative_eq!(q.lambda_tilde_inv, dot(&b, &a) / quad(&b), max_relative = 1e-12);
        assert_relative_eq!(q.lambda_tilde_star_inv, dot(&b, &b) / quad(&b), max_relative = 1e-12);
    }

    #[test]
    fn tags_parse_and_print() {
        for t in [Theorem::T31, Theorem::T41, Theorem::C41, Theorem::T42] {
            assert_eq!(t.to_string().parse::<Theorem>().unwrap(), t);
        }
        assert!("T99".parse::<Theorem>().is_err());
        assert_eq!("proof".parse::<ConstantMode>().unwrap(), ConstantMode::PROOF);
        assert_eq!(
            "calibrated(2.5)".parse::<ConstantMode>().unwrap(),
            ConstantMode::Calibrated(2.5)
        );
        assert_eq!(ConstantMode::Calibrated(2.5).to_string(), "calibrated(2.5)");
        assert!("calibrated(-1)".parse::<ConstantMode>().is_err());
    }
}
