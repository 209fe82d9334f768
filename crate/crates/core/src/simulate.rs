//! Scenario construction with exact Gram matrices and the Monte Carlo
//! replicate harness.
//!
//! Replicate `i` draws its noise from `ChaCha8` seeded with the master seed on
//! stream `i`; the design uses a dedicated stream. Results are therefore
//! independent of how replicates are scheduled across threads.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::bounds::{self, BoundReport, ConstantMode, PopulationContext, Theorem};
use crate::error::{Error, Result};
use crate::linalg::{self, dot, Matrix, SymMatrix};
use crate::pls::{fit_pls, RANK_TOL};
use crate::single::{self, theorem1_constants, Theorem1Constants, DEFAULT_R};
use crate::sparse::{self, mu_level, DMode, SparseVariant};

/// Stream reserved for the design; replicate streams are their indices.
const DESIGN_STREAM: u64 = u64::MAX;

/// Environment variable capping replicate parallelism.
pub const THREADS_ENV: &str = "PLSLAB_THREADS";

/// Reconstruction tolerance on `‖XᵀX/n − Σ‖_∞`.
pub const GRAM_FIDELITY_TOL: f64 = 1e-10;

pub const CALIBRATION_BRACKET: (f64, f64) = (1e-3, 1e6);
pub const CALIBRATION_ITERS: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub enum DesignKind {
    Identity,
    RankOne { lambda: f64 },
    Ar1 { rho: f64 },
    Diagonal(Vec<f64>),
    Custom(SymMatrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignSpec {
    pub kind: DesignKind,
    pub n: usize,
    pub p: usize,
    /// Rescale `Σ` to unit diagonal.
    pub normalize_columns: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BetaSpec {
    Zero,
    /// Leading eigenvector of `Σ` with the given Euclidean norm.
    InSpanSigma { magnitude: f64 },
    /// `magnitude` on the first `s` coordinates.
    Sparse { s: usize, magnitude: f64 },
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    PlsK(usize),
    Single,
    Thresholded,
    Spls,
    Alt,
}

impl EstimatorKind {
    pub fn is_sparse(self) -> bool {
        matches!(self, EstimatorKind::Spls | EstimatorKind::Alt)
    }

    /// The bound naturally attached to the estimator.
    pub fn default_theorem(self) -> Theorem {
        match self {
            EstimatorKind::Spls => Theorem::T41,
            EstimatorKind::Alt => Theorem::T42,
            _ => Theorem::T31,
        }
    }

    pub fn sparse_variant(self) -> Option<SparseVariant> {
        match self {
            EstimatorKind::Spls => Some(SparseVariant::Spls),
            EstimatorKind::Alt => Some(SparseVariant::Alt),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub design: DesignSpec,
    pub beta: BetaSpec,
    pub tau: f64,
    pub delta: f64,
    pub estimator: EstimatorKind,
    pub replicates: usize,
    pub seed: u64,
    /// Defaults to the estimator's own bound.
    pub theorem: Option<Theorem>,
    pub constant_mode: ConstantMode,
    /// Restricted-eigenvalue surrogate; defaults to `1/min_eig_on_support(Σ, J₀)`.
    pub phi: Option<f64>,
    pub mu: Option<f64>,
    pub r: Option<f64>,
}

impl SimConfig {
    pub fn new(
        design: DesignSpec,
        beta: BetaSpec,
        tau: f64,
        delta: f64,
        estimator: EstimatorKind,
        replicates: usize,
        seed: u64,
    ) -> Self {
        SimConfig {
            design,
            beta,
            tau,
            delta,
            estimator,
            replicates,
            seed,
            theorem: None,
            constant_mode: ConstantMode::PROOF,
            phi: None,
            mu: None,
            r: None,
        }
    }

    pub fn theorem(&self) -> Theorem {
        self.theorem.unwrap_or_else(|| self.estimator.default_theorem())
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.design;
        if d.n == 0 || d.p == 0 {
            return Err(Error::invalid("design requires n >= 1 and p >= 1"));
        }
        if self.replicates == 0 {
            return Err(Error::invalid("replicates must be >= 1"));
        }
        if !(self.tau >= 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid(format!("tau must be finite and >= 0, got {}", self.tau)));
        }
        let theorem = self.theorem();
        let sparse = self.estimator.is_sparse() || theorem != Theorem::T31;
        let upper = if sparse { 0.5 } else { 1.0 };
        if !(self.delta > 0.0 && self.delta < upper) {
            return Err(Error::invalid(format!(
                "delta must lie in (0, {upper}) for this configuration, got {}",
                self.delta
            )));
        }
        match self.estimator {
            EstimatorKind::PlsK(k) if k == 0 || k > d.p => {
                return Err(Error::invalid(format!("K must lie in 1..={}, got {k}", d.p)));
            }
            EstimatorKind::Thresholded if self.tau == 0.0 => {
                return Err(Error::invalid("the thresholded estimator requires tau > 0"));
            }
            EstimatorKind::Spls | EstimatorKind::Alt if self.tau == 0.0 && self.mu.is_none() => {
                return Err(Error::invalid("sparse estimators require tau > 0 or a mu override"));
            }
            _ => {}
        }
        if let Some(mu) = self.mu {
            if !(mu >= 0.0) || !mu.is_finite() {
                return Err(Error::invalid(format!("mu must be finite and >= 0, got {mu}")));
            }
        }
        if let Some(r) = self.r {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::invalid(format!("r must lie in (0, 1), got {r}")));
            }
        }
        if let Some(phi) = self.phi {
            if !(phi > 0.0) || !phi.is_finite() {
                return Err(Error::invalid(format!("phi must be finite and > 0, got {phi}")));
            }
        }
        if let ConstantMode::Calibrated(c) = self.constant_mode {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::invalid(format!("calibrated constant must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

fn design_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DESIGN_STREAM);
    rng
}

/// Noise generator for replicate `rep`.
pub fn replicate_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    rng
}

/// The population Gram matrix `Σ` a design spec describes (no `X` is built).
pub fn target_gram(spec: &DesignSpec, seed: u64) -> Result<SymMatrix> {
    target_gram_from(spec, &mut design_rng(seed))
}

fn target_gram_from(spec: &DesignSpec, rng: &mut ChaCha8Rng) -> Result<SymMatrix> {
    let p = spec.p;
    let gram = match &spec.kind {
        DesignKind::Identity => SymMatrix::identity(p),
        DesignKind::RankOne { lambda } => {
            if !(*lambda > 0.0) || !lambda.is_finite() {
                return Err(Error::invalid(format!("rank_one requires lambda > 0, got {lambda}")));
            }
            let mut u: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
            let norm = linalg::norm2(&u);
            u.iter_mut().for_each(|v| *v /= norm);
            SymMatrix::from_fn(p, |i, j| lambda * u[i] * u[j])
        }
        DesignKind::Ar1 { rho } => {
            if !(*rho > 0.0 && *rho < 1.0) {
                return Err(Error::invalid(format!("ar1 requires rho in (0, 1), got {rho}")));
            }
            SymMatrix::from_fn(p, |i, j| rho.powi((i - j) as i32))
        }
        DesignKind::Diagonal(values) => {
            if values.len() != p {
                return Err(Error::invalid(format!(
                    "diagonal design has {} values but p = {p}",
                    values.len()
                )));
            }
            if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::invalid("diagonal values must be finite and >= 0"));
            }
            SymMatrix::diagonal(values)
        }
        DesignKind::Custom(m) => {
            if m.dim() != p {
                return Err(Error::invalid(format!(
                    "custom Gram matrix is {0}x{0} but p = {p}",
                    m.dim()
                )));
            }
            if !m.is_finite() {
                return Err(Error::invalid("custom Gram matrix contains non-finite entries"));
            }
            let min = linalg::sym_eigen(m).values.first().copied().unwrap_or(0.0);
            if min < -linalg::psd_tolerance(m) {
                return Err(Error::invalid(format!(
                    "custom Gram matrix is not PSD (smallest eigenvalue {min})"
                )));
            }
            m.clone()
        }
    };
    if !spec.normalize_columns {
        return Ok(gram);
    }
    let diag = gram.diag();
    if let Some(j) = diag.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::invalid(format!(
            "cannot normalize columns: Sigma[{j},{j}] = {}",
            diag[j]
        )));
    }
    let scale: Vec<f64> = diag.iter().map(|v| 1.0 / v.sqrt()).collect();
    Ok(SymMatrix::from_fn(p, |i, j| {
        if i == j {
            1.0
        } else {
            gram.get(i, j) * scale[i] * scale[j]
        }
    }))
}

/// Random `n × r` matrix with orthonormal columns.
fn orthonormal_frame(n: usize, r: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let raw: Vec<Vec<f64>> = (0..r)
        .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let q = linalg::orthonormalize(&raw, RANK_TOL);
    if q.len() != r {
        return Err(Error::NonConvergence {
            message: "random frame lost rank during orthonormalization".into(),
            last_iterate: q.len() as f64,
        });
    }
    Ok(q)
}

/// Builds `X` with `XᵀX/n = Σ` and returns `(X, Σ)`.
///
/// When `n ≥ p` this is `√n Q Σ^{1/2}`. Otherwise `Σ` must have rank at most
/// `n` and `X = √n Q Λ_r^{1/2} V_rᵀ` from its eigen-decomposition.
pub fn build_design(spec: &DesignSpec, seed: u64) -> Result<(Matrix, SymMatrix)> {
    if spec.n == 0 || spec.p == 0 {
        return Err(Error::invalid("design requires n >= 1 and p >= 1"));
    }
    let (n, p) = (spec.n, spec.p);
    let mut rng = design_rng(seed);
    let gram = target_gram_from(spec, &mut rng)?;
    let root_n = (n as f64).sqrt();

    let x = if n >= p {
        let q = orthonormal_frame(n, p, &mut rng)?;
        let root = linalg::sym_sqrt(&gram)?;
        Matrix::from_fn(n, p, |i, j| {
            root_n * (0..p).map(|k| q[k][i] * root.get(k, j)).sum::<f64>()
        })
    } else {
        let eig = linalg::sym_eigen(&gram);
        let tol = linalg::psd_tolerance(&gram);
        let kept: Vec<usize> = (0..p).filter(|&k| eig.values[k] > tol).collect();
        if kept.len() > n {
            return Err(Error::invalid(format!(
                "n = {n} < p = {p} and Sigma has rank {}: an exact Gram construction needs rank(Sigma) <= n",
                kept.len()
            )));
        }
        let q = orthonormal_frame(n, kept.len(), &mut rng)?;
        Matrix::from_fn(n, p, |i, j| {
            root_n
                * kept
                    .iter()
                    .enumerate()
                    .map(|(c, &k)| q[c][i] * eig.values[k].sqrt() * eig.vectors.get(j, k))
                    .sum::<f64>()
        })
    };

    let err = linalg::gram(&x, n)?.max_abs_diff(&gram);
    if !(err < GRAM_FIDELITY_TOL) {
        return Err(Error::NonConvergence {
            message: format!("design reconstruction error {err} exceeds {GRAM_FIDELITY_TOL}"),
            last_iterate: err,
        });
    }
    Ok((x, gram))
}

/// Resolves a β generator against the target `Σ`.
pub fn build_beta(spec: &BetaSpec, gram: &SymMatrix) -> Result<Vec<f64>> {
    let p = gram.dim();
    match spec {
        BetaSpec::Zero => Ok(vec![0.0; p]),
        BetaSpec::InSpanSigma { magnitude } => {
            let eig = linalg::sym_eigen(gram);
            // first index attaining the top eigenvalue, for reproducible ties
            let top = eig.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let k = eig.values.iter().position(|v| *v == top).unwrap_or(0);
            let mut v = eig.vectors.column(k);
            let lead = v
                .iter()
                .cloned()
                .fold(0.0_f64, |m, x| if x.abs() > m.abs() { x } else { m });
            let sign = if lead < 0.0 { -1.0 } else { 1.0 };
            let norm = linalg::norm2(&v);
            v.iter_mut().for_each(|x| *x *= sign * magnitude / norm);
            Ok(v)
        }
        BetaSpec::Sparse { s, magnitude } => {
            if *s > p {
                return Err(Error::invalid(format!("sparse beta needs s <= p, got s = {s}, p = {p}")));
            }
            Ok((0..p).map(|j| if j < *s { *magnitude } else { 0.0 }).collect())
        }
        BetaSpec::Explicit(b) => {
            if b.len() != p {
                return Err(Error::invalid(format!(
                    "explicit beta has length {} but p = {p}",
                    b.len()
                )));
            }
            if !linalg::is_finite_vec(b) {
                return Err(Error::invalid("explicit beta contains non-finite values"));
            }
            Ok(b.clone())
        }
    }
}

/// `Y = Xβ + τz` with `z` standard normal drawn from `rng`.
pub fn sample_response<R: Rng + ?Sized>(
    x: &Matrix,
    beta: &[f64],
    tau: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("tau must be finite and >= 0, got {tau}")));
    }
    let mut y = x.mul_vec(beta)?;
    for v in y.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += tau * z;
    }
    Ok(y)
}

/// Everything that stays fixed across replicates.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: SimConfig,
    pub x: Matrix,
    /// Target `Σ`, used for population quantities.
    pub gram: SymMatrix,
    /// `XᵀX/n` as the estimators see it.
    pub empirical_gram: SymMatrix,
    pub ctx: PopulationContext,
    pub bound: BoundReport,
    pub theorem: Theorem,
    pub phi: Option<f64>,
    /// Threshold level used by the sparse estimator and the `M` event.
    pub mu: f64,
    pub single_constants: Option<Theorem1Constants>,
    /// Sparse signal-strength requirement evaluated with the theorem-form `d`.
    pub signal_condition: bool,
    pub unit_diagonal: bool,
}

impl Scenario {
    pub fn build(config: &SimConfig) -> Result<Self> {
        config.validate()?;
        let (x, gram) = build_design(&config.design, config.seed)?;
        let beta = build_beta(&config.beta, &gram)?;
        let n = config.design.n;
        let ctx = PopulationContext::new(beta, gram.clone(), config.tau, n)?;
        let empirical_gram = linalg::gram(&x, n)?;
        let theorem = config.theorem();

        let phi = if theorem.needs_phi() {
            let phi = match config.phi {
                Some(phi) => phi,
                None if ctx.j0.is_empty() => 1.0,
                None => {
                    let m = linalg::min_eig_on_support(&gram, &ctx.j0)?;
                    if !(m > 0.0) {
                        return Err(Error::invalid(
                            "Sigma restricted to J0 is singular; supply phi explicitly",
                        ));
                    }
                    1.0 / m
                }
            };
            if ctx.lambda > 0.0 && ctx.lambda * phi < 1.0 - 1e-12 {
                return Err(Error::invalid(format!(
                    "phi = {phi} is inconsistent with lambda = {} (lambda * phi < 1)",
                    ctx.lambda
                )));
            }
            Some(phi)
        } else {
            None
        };

        let variant = config.estimator.sparse_variant().unwrap_or(SparseVariant::Spls);
        let mu = match config.mu {
            Some(mu) => mu,
            None if config.tau > 0.0 => mu_level(config.tau, n, config.design.p, config.delta, variant)?,
            None => 0.0,
        };
        let single_constants = if config.estimator == EstimatorKind::Thresholded {
            Some(theorem1_constants(
                config.delta,
                config.r.unwrap_or(DEFAULT_R),
                config.tau,
                n,
                &empirical_gram,
            )?)
        } else {
            None
        };
        let bound = bounds::theorem_rhs(theorem, &ctx, &x, config.delta, phi, config.constant_mode)?;
        let signal_condition = if config.delta < 0.5 {
            bounds::signal_condition_holds(&ctx, config.delta, DMode::Theorem)?
        } else {
            false
        };
        let unit_diagonal = gram.diag().iter().all(|v| (v - 1.0).abs() <= 1e-10);
        Ok(Scenario {
            config: config.clone(),
            x,
            gram,
            empirical_gram,
            ctx,
            bound,
            theorem,
            phi,
            mu,
            single_constants,
            signal_condition,
            unit_diagonal,
        })
    }

    fn estimate(&self, y: &[f64], sigma_hat: &[f64]) -> Result<Vec<f64>> {
        let g = &self.empirical_gram;
        Ok(match self.config.estimator {
            EstimatorKind::PlsK(k) => fit_pls(&self.x, y, k)?.beta,
            EstimatorKind::Single => single::single_component_estimator(sigma_hat, g)?.beta,
            EstimatorKind::Thresholded => {
                let consts = self
                    .single_constants
                    .expect("thresholded scenario carries its constants");
                single::thresholded_from_moments(sigma_hat.to_vec(), g, consts).0
            }
            EstimatorKind::Spls | EstimatorKind::Alt => {
                let variant = self.config.estimator.sparse_variant().unwrap();
                sparse::sparse_from_moments(sigma_hat.to_vec(), g, self.mu, variant)?.beta
            }
        })
    }

    /// Runs replicate `rep` against the scenario's bound.
    pub fn run_one(&self, rep: usize) -> ReplicateRecord {
        match self.try_run_one(rep) {
            Ok(record) => record,
            Err(e) => ReplicateRecord {
                rep,
                loss: f64::NAN,
                rhs: self.bound.rhs,
                covered: false,
                a: [false; 3],
                m: false,
                b: [false; 3],
                error: Some(e.to_string()),
            },
        }
    }

    fn try_run_one(&self, rep: usize) -> Result<ReplicateRecord> {
        let mut rng = replicate_rng(self.config.seed, rep);
        let y = sample_response(&self.x, &self.ctx.beta, self.config.tau, &mut rng)?;
        let n = self.x.rows() as f64;
        let sigma_hat = linalg::scaled(1.0 / n, &self.x.tr_mul_vec(&y)?);
        let beta_hat = self.estimate(&y, &sigma_hat)?;
        let fitted = self.x.mul_vec(&linalg::sub(&beta_hat, &self.ctx.beta))?;
        let loss = dot(&fitted, &fitted) / n;
        let delta = self.config.delta;
        Ok(ReplicateRecord {
            rep,
            loss,
            rhs: self.bound.rhs,
            covered: loss <= self.bound.rhs + bounds::ROUNDOFF_REL * dot(&self.ctx.sigma, &self.ctx.beta),
            a: bounds::dense_events(&sigma_hat, &self.ctx, single::x_delta(delta))?,
            m: bounds::m_event(&sigma_hat, &self.ctx, self.mu),
            b: bounds::sparse_events(&sigma_hat, &self.ctx, sparse::x0_delta(delta))?,
            error: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub rep: usize,
    pub loss: f64,
    pub rhs: f64,
    pub covered: bool,
    /// Dense deviation events.
    pub a: [bool; 3],
    /// Uniform coordinate deviation event.
    pub m: bool,
    /// Sparse deviation events.
    pub b: [bool; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ReplicateRecord {
    pub fn a_all(&self) -> bool {
        self.a.iter().all(|v| *v)
    }

    pub fn b_all(&self) -> bool {
        self.b.iter().all(|v| *v)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimSummary {
    pub replicates: usize,
    pub covered: usize,
    pub coverage: f64,
    pub mean_loss: f64,
    pub median_loss: f64,
    /// Replicates whose estimator or event evaluation failed.
    pub failed: usize,
    pub deviation_event_rates: BTreeMap<String, f64>,
    pub bound: BoundReport,
    pub signal_condition: bool,
    pub mu: f64,
    #[serde(skip)]
    pub records: Vec<ReplicateRecord>,
}

impl SimSummary {
    fn from_records(records: Vec<ReplicateRecord>, scenario: &Scenario) -> Self {
        let r = records.len();
        let covered = records.iter().filter(|x| x.covered).count();
        let failed = records.iter().filter(|x| x.error.is_some()).count();
        let mut losses: Vec<f64> = records.iter().map(|x| x.loss).filter(|v| v.is_finite()).collect();
        let mean_loss = if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        losses.sort_by(f64::total_cmp);
        let median_loss = match losses.len() {
            0 => f64::NAN,
            m if m % 2 == 1 => losses[m / 2],
            m => 0.5 * (losses[m / 2 - 1] + losses[m / 2]),
        };
        let rate = |f: &dyn Fn(&ReplicateRecord) -> bool| {
            records.iter().filter(|x| f(x)).count() as f64 / r as f64
        };
        let mut rates = BTreeMap::new();
        for i in 0..3 {
            rates.insert(format!("A{}", i + 1), rate(&|x| x.a[i]));
            rates.insert(format!("B{}", i + 1), rate(&|x| x.b[i]));
        }
        rates.insert("A".to_string(), rate(&|x| x.a_all()));
        rates.insert("B".to_string(), rate(&|x| x.b_all()));
        rates.insert("M".to_string(), rate(&|x| x.m));
        SimSummary {
            replicates: r,
            covered,
            coverage: covered as f64 / r as f64,
            mean_loss,
            median_loss,
            failed,
            deviation_event_rates: rates,
            bound: scenario.bound.clone(),
            signal_condition: scenario.signal_condition,
            mu: scenario.mu,
            records,
        }
    }
}

/// Thread pool honoring `PLSLAB_THREADS`.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(raw) = std::env::var(THREADS_ENV) {
        let threads: usize = raw
            .trim()
            .parse()
            .ok()
            .filter(|t| *t >= 1)
            .ok_or_else(|| Error::invalid(format!("{THREADS_ENV} must be a positive integer, got '{raw}'")))?;
        builder = builder.num_threads(threads);
    }
    builder
        .build()
        .map_err(|e| Error::invalid(format!("cannot build thread pool: {e}")))
}

/// Runs every replicate of a prepared scenario; records come back in index order.
pub fn run_scenario(scenario: &Scenario) -> Result<SimSummary> {
    let pool = thread_pool()?;
    let records: Vec<ReplicateRecord> = pool.install(|| {
        (0..scenario.config.replicates)
            .into_par_iter()
            .map(|rep| scenario.run_one(rep))
            .collect()
    });
    Ok(SimSummary::from_records(records, scenario))
}

pub fn run_replicates(cfg: &SimConfig) -> Result<SimSummary> {
    run_scenario(&Scenario::build(cfg)?)
}

/// Sample mean and covariance of `σ̂ = XᵀY/n` over `draws` responses.
pub fn empirical_sigma_moments(cfg: &SimConfig, draws: usize) -> Result<(Vec<f64>, SymMatrix)> {
    if draws < 100 {
        return Err(Error::invalid(format!("draws must be >= 100, got {draws}")));
    }
    let (x, gram) = build_design(&cfg.design, cfg.seed)?;
    let beta = build_beta(&cfg.beta, &gram)?;
    let n = x.rows() as f64;
    let p = x.cols();
    let pool = thread_pool()?;
    let samples: Vec<Result<Vec<f64>>> = pool.install(|| {
        (0..draws)
            .into_par_iter()
            .map(|d| {
                let mut rng = replicate_rng(cfg.seed, d);
                let y = sample_response(&x, &beta, cfg.tau, &mut rng)?;
                Ok(linalg::scaled(1.0 / n, &x.tr_mul_vec(&y)?))
            })
            .collect()
    });
    let samples: Vec<Vec<f64>> = samples.into_iter().collect::<Result<_>>()?;
    let mut mean = vec![0.0; p];
    for s in &samples {
        linalg::axpy(1.0, s, &mut mean);
    }
    mean.iter_mut().for_each(|v| *v /= draws as f64);
    let mut cov = vec![0.0; p * p];
    for s in &samples {
        for i in 0..p {
            let di = s[i] - mean[i];
            for j in 0..=i {
                cov[i * p + j] += di * (s[j] - mean[j]);
            }
        }
    }
    let denom = (draws - 1) as f64;
    Ok((mean, SymMatrix::from_fn(p, |i, j| cov[i * p + j] / denom)))
}

/// `1 − δ − 3√(δ(1−δ)/R)`
pub fn coverage_threshold(delta: f64, replicates: usize) -> f64 {
    1.0 - delta - 3.0 * (delta * (1.0 - delta) / replicates as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Calibration {
    pub constant: f64,
    /// Coverage at `constant` on the calibration replicates.
    pub coverage: f64,
    /// False when even the upper bracket misses `1 − δ`.
    pub achieved: bool,
}

/// Smallest calibrated constant reaching coverage `1 − δ` on `cfg`'s replicates.
pub fn calibrate_constant(cfg: &SimConfig, theorem: Theorem) -> Result<Calibration> {
    if cfg.replicates < 500 {
        return Err(Error::invalid(format!(
            "calibration needs at least 500 replicates, got {}",
            cfg.replicates
        )));
    }
    let mut cfg = cfg.clone();
    cfg.theorem = Some(theorem);
    cfg.constant_mode = ConstantMode::Calibrated(1.0);
    let scenario = Scenario::build(&cfg)?;
    let summary = run_scenario(&scenario)?;
    // with c = 1 the variance equals the shape factor
    let bias = scenario.bound.bias;
    let shape = scenario.bound.variance;
    let losses: Vec<f64> = summary.records.iter().map(|r| r.loss).collect();
    let target = 1.0 - cfg.delta;
    let coverage = |c: f64| {
        let rhs = if shape.is_infinite() { f64::INFINITY } else { bias + c * shape };
        losses.iter().filter(|l| **l <= rhs).count() as f64 / losses.len() as f64
    };
    let (mut lo, mut hi) = CALIBRATION_BRACKET;
    if coverage(lo) >= target {
        return Ok(Calibration { constant: lo, coverage: coverage(lo), achieved: true });
    }
    if coverage(hi) < target {
        return Ok(Calibration { constant: hi, coverage: coverage(hi), achieved: false });
    }
    for _ in 0..CALIBRATION_ITERS {
        let mid = 0.5 * (lo + hi);
        if coverage(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Calibration { constant: hi, coverage: coverage(hi), achieved: true })
}
