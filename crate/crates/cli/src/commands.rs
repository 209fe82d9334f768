use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use serde_json::json;

use plslab::bounds;
use plslab::io::{self, json_f64, json_vec, ResultRecord, RunConfigFile};
use plslab::simulate::{self, DesignKind, DesignSpec, SimSummary};
use plslab::single::{self, theorem1_constants};
use plslab::sparse::{self, mu_level, DMode, SparseVariant, C0, F};
use plslab::{linalg, pls, Error, Result};

use crate::{ConstantsArgs, DesignArg, EstimatorArg, FitArgs, RunArgs};

const VERIFY_FAILED: u8 = 3;

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

fn require<T>(v: Option<T>, flag: &str, estimator: &str) -> Result<T> {
    v.ok_or_else(|| invalid(format!("--{flag} is required for estimator {estimator}")))
}

pub fn fit(args: FitArgs) -> Result<ExitCode> {
    let data = io::load_dataset(&args.data, args.standardize)?;
    let (x, y) = (&data.x, &data.y);
    let mut config = BTreeMap::new();
    config.insert("data".to_string(), args.data.display().to_string());
    config.insert("standardize".to_string(), args.standardize.to_string());

    let (name, beta_hat, diagnostics) = match args.estimator {
        EstimatorArg::PlsK => {
            let k = require(args.k, "k", "pls_k")?;
            config.insert("k".into(), k.to_string());
            let fit = pls::fit_pls(x, y, k)?;
            let diag = json!({
                "components_requested": fit.requested,
                "components_built": fit.built(),
                "components_used": fit.used,
                "terminated_early": fit.terminated_early,
                "degenerate": fit.degenerate,
            });
            ("pls_k", fit.beta, diag)
        }
        EstimatorArg::Single => {
            let (sigma_hat, gram) = single::empirical_moments(x, y)?;
            let est = single::single_component_estimator(&sigma_hat, &gram)?;
            let diag = json!({
                "sigma_hat": json_vec(&sigma_hat),
                "degenerate": est.degenerate,
            });
            ("single", est.beta, diag)
        }
        EstimatorArg::Thresholded => {
            let tau = require(args.tau, "tau", "thresholded")?;
            let delta = require(args.delta, "delta", "thresholded")?;
            config.insert("tau".into(), tau.to_string());
            config.insert("delta".into(), delta.to_string());
            if let Some(r) = args.r {
                config.insert("r".into(), r.to_string());
            }
            let (beta, d) = single::thresholded_estimator(x, y, tau, delta, args.r)?;
            let c = &d.constants;
            let diag = json!({
                "sigma_hat": json_vec(&d.sigma_hat),
                "quad_form": json_f64(d.quad_form),
                "intensity": json_f64(d.intensity),
                "test_threshold": json_f64(d.test_threshold),
                "test_passed": d.test_passed,
                "x_delta": json_f64(c.x_delta),
                "t_delta_r": json_f64(c.t_delta_r),
                "p_n": json_f64(c.p_n),
            });
            ("thresholded", beta, diag)
        }
        EstimatorArg::Spls | EstimatorArg::Alt => {
            let (label, variant) = match args.estimator {
                EstimatorArg::Spls => ("spls", SparseVariant::Spls),
                _ => ("alt", SparseVariant::Alt),
            };
            let delta = require(args.delta, "delta", label)?;
            config.insert("delta".into(), delta.to_string());
            let tau = match (args.tau, args.mu) {
                (Some(t), _) => t,
                (None, Some(_)) => 0.0,
                (None, None) => return Err(invalid(format!("--tau or --mu is required for estimator {label}"))),
            };
            if let Some(t) = args.tau {
                config.insert("tau".into(), t.to_string());
            }
            if let Some(mu) = args.mu {
                config.insert("mu".into(), mu.to_string());
            }
            let fit = match variant {
                SparseVariant::Spls => sparse::spls_estimator(x, y, tau, delta, args.mu)?,
                SparseVariant::Alt => sparse::alt_estimator(x, y, tau, delta, args.mu)?,
            };
            let gram = linalg::gram(x, x.rows())?;
            let hat_quad = gram.quad_form(&fit.sigma_hat);
            let tilde_quad = gram.quad_form(&fit.sigma_tilde);
            let ratio = |a: f64, b: f64| if b == 0.0 { f64::INFINITY } else { a / b };
            let diag = json!({
                "mu": json_f64(fit.mu),
                "support_hat": fit.support_hat,
                "sigma_tilde": json_vec(&fit.sigma_tilde),
                "lambda_hat_inv": json_f64(ratio(linalg::dot(&fit.sigma_hat, &fit.sigma_hat), hat_quad)),
                "lambda_tilde_inv": json_f64(ratio(linalg::dot(&fit.sigma_tilde, &fit.sigma_hat), tilde_quad)),
                "lambda_tilde_star_inv": json_f64(ratio(linalg::dot(&fit.sigma_tilde, &fit.sigma_tilde), tilde_quad)),
                "degenerate": fit.degenerate,
            });
            (label, fit.beta, diag)
        }
    };
    config.insert("estimator".into(), name.to_string());

    println!("estimator: {name}");
    println!("beta_hat:");
    for (j, b) in beta_hat.iter().enumerate() {
        println!("  x{} {b}", j + 1);
    }
    println!("diagnostics:");
    if let Some(map) = diagnostics.as_object() {
        for (k, v) in map {
            println!("  {k} {v}");
        }
    }

    let record = ResultRecord {
        run_id: args.run_id,
        config,
        beta_hat,
        diagnostics,
        bound: None,
        replicate_table: None,
    };
    io::write_json(&args.output, &record.to_json())?;
    println!("wrote {}", args.output.display());
    Ok(ExitCode::SUCCESS)
}

fn output_dir(args: &RunArgs, cfg: &RunConfigFile) -> PathBuf {
    args.output_dir
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("plslab_out"))
}

fn run(cfg: &RunConfigFile, dir: &Path) -> Result<SimSummary> {
    let summary = simulate::run_replicates(&cfg.sim)?;
    io::write_simulation(dir, &summary, cfg)?;
    Ok(summary)
}

fn print_summary(summary: &SimSummary, delta: f64) {
    let b = &summary.bound;
    println!("theorem            {}", b.theorem);
    println!("constant_mode      {}", b.constant_mode);
    println!("constant           {}", b.constant);
    println!("bias               {}", b.bias);
    println!("variance           {}", b.variance);
    println!("rhs                {}", b.rhs);
    println!("replicates         {}", summary.replicates);
    println!("covered            {}", summary.covered);
    println!("coverage           {}", summary.coverage);
    println!("threshold          {}", simulate::coverage_threshold(delta, summary.replicates));
    println!("mean_loss          {}", summary.mean_loss);
    println!("median_loss        {}", summary.median_loss);
    for (k, v) in &summary.deviation_event_rates {
        println!("event_rate[{k}]{:width$}{v}", "", width = 8 - k.len());
    }
    if summary.failed > 0 {
        println!("failed_replicates  {}", summary.failed);
    }
}

pub fn simulate(args: RunArgs) -> Result<ExitCode> {
    let cfg = RunConfigFile::load(&args.config)?;
    let dir = output_dir(&args, &cfg);
    let summary = run(&cfg, &dir)?;
    print_summary(&summary, cfg.sim.delta);
    println!("wrote {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

pub fn verify(args: RunArgs) -> Result<ExitCode> {
    let cfg = RunConfigFile::load(&args.config)?;
    if cfg.sim.theorem.is_none() {
        return Err(invalid("verify requires a 'theorem' key (T31, T41, C41 or T42) in the config"));
    }
    let dir = output_dir(&args, &cfg);
    let summary = run(&cfg, &dir)?;
    print_summary(&summary, cfg.sim.delta);
    let threshold = simulate::coverage_threshold(cfg.sim.delta, summary.replicates);
    if summary.coverage >= threshold {
        println!("verdict            PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("verdict            FAIL");
        Ok(ExitCode::from(VERIFY_FAILED))
    }
}

pub fn constants(args: ConstantsArgs) -> Result<ExitCode> {
    let kind = match args.design {
        DesignArg::Identity => DesignKind::Identity,
        DesignArg::RankOne => DesignKind::RankOne {
            lambda: args.lambda.ok_or_else(|| invalid("--lambda is required for design rank_one"))?,
        },
        DesignArg::Ar1 => DesignKind::Ar1 {
            rho: args.rho.ok_or_else(|| invalid("--rho is required for design ar1"))?,
        },
        DesignArg::Diagonal => DesignKind::Diagonal(
            args.diagonal.clone().ok_or_else(|| invalid("--diagonal is required for design diagonal"))?,
        ),
    };
    if args.n == 0 || args.p == 0 {
        return Err(invalid("--n and --p must be >= 1"));
    }
    let spec = DesignSpec { kind, n: args.n, p: args.p, normalize_columns: args.normalize_columns };
    let gram = simulate::target_gram(&spec, args.seed)?;
    let c = theorem1_constants(args.delta, args.r, args.tau, args.n, &gram)?;

    let mut rows: Vec<(&str, &str, f64)> = vec![
        ("x_delta", "both", c.x_delta),
        ("g_x_delta", "both", c.g_x),
        ("t_delta_r", "both", c.t_delta_r),
        ("h_delta_r", "both", c.h_delta_r),
        ("C_delta_r", "both", c.c_delta_r),
        ("p_n", "both", c.p_n),
        ("C_prime_delta_r", "proof", bounds::theorem31_proof_constant(args.delta, args.r)?),
        ("F", "theorem", F),
        ("C0", "theorem", C0),
    ];
    if args.delta < 0.5 {
        let d_th = sparse::d_delta_p(args.delta, args.p, DMode::Theorem)?;
        let d_pr = sparse::d_delta_p(args.delta, args.p, DMode::Proof)?;
        let spls = bounds::sparse_proof_constants(args.delta, args.p, SparseVariant::Spls, 1.0)?;
        let alt = bounds::sparse_proof_constants(args.delta, args.p, SparseVariant::Alt, 1.0)?;
        rows.extend([
            ("mu_spls", "both", mu_level(args.tau, args.n, args.p, args.delta, SparseVariant::Spls)?),
            ("mu_alt", "both", mu_level(args.tau, args.n, args.p, args.delta, SparseVariant::Alt)?),
            ("x0_delta", "both", sparse::x0_delta(args.delta)),
            ("d_delta_p", "theorem", d_th),
            ("d_delta_p", "proof", d_pr),
            ("C_I", "proof", spls.c_i),
            ("C_II", "proof", spls.c_ii),
            ("C_III", "proof", spls.c_iii),
            ("D_delta", "proof", spls.total),
            ("D_prime_delta", "proof", alt.total),
        ]);
    } else {
        eprintln!("note: sparse constants need delta < 1/2 and are omitted");
    }
    println!("name,mode,value");
    for (name, mode, value) in rows {
        println!("{name},{mode},{value}");
    }
    Ok(ExitCode::SUCCESS)
}
