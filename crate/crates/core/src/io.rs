//! Dataset ingestion, run-configuration files and result persistence.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::bounds::{BoundReport, ConstantMode, Theorem};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, SymMatrix};
use crate::simulate::{BetaSpec, DesignKind, DesignSpec, EstimatorKind, ReplicateRecord, SimConfig, SimSummary};

/// Header of the per-replicate table.
pub const REPLICATE_HEADER: [&str; 11] =
    ["rep", "loss", "rhs", "covered", "A1", "A2", "A3", "M", "B1", "B2", "B3"];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<f64>,
}

/// Reads a CSV with header `x1,...,xp,y`. With `standardize`, each column of
/// `X` is rescaled so that `(XᵀX/n)_jj = 1`.
pub fn load_dataset(path: &Path, standardize: bool) -> Result<Dataset> {
    let file = fs::File::open(path)?;
    parse_dataset(file, &path.display().to_string(), standardize)
}

pub fn parse_dataset<R: std::io::Read>(reader: R, source: &str, standardize: bool) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::parse(format!("{source}: header"), e.to_string()))?
        .clone();
    let width = header.len();
    if width < 2 || &header[width - 1] != "y" {
        return Err(Error::parse(
            format!("{source}: header"),
            "expected columns x1..xp followed by a final 'y' column",
        ));
    }
    for (j, name) in header.iter().take(width - 1).enumerate() {
        if name != format!("x{}", j + 1) {
            return Err(Error::parse(
                format!("{source}: header column {}", j + 1),
                format!("expected 'x{}', found '{name}'", j + 1),
            ));
        }
    }
    let p = width - 1;
    let mut data = Vec::new();
    let mut y = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::parse(format!("{source}: row {row}"), e.to_string()))?;
        if record.len() != width {
            return Err(Error::parse(
                format!("{source}: row {row}"),
                format!("expected {width} fields, found {}", record.len()),
            ));
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
                Error::parse(
                    format!("{source}: row {row}, column {}", &header[j]),
                    format!("'{cell}' is not a finite number"),
                )
            })?;
            if j < p {
                data.push(v);
            } else {
                y.push(v);
            }
        }
    }
    let n = y.len();
    if n == 0 {
        return Err(Error::parse(source.to_string(), "no data rows"));
    }
    let mut x = Matrix::new(n, p, data)?;
    if standardize {
        for j in 0..p {
            let ss: f64 = (0..n).map(|i| x.get(i, j).powi(2)).sum::<f64>() / n as f64;
            if ss == 0.0 {
                return Err(Error::invalid(format!("column x{} is identically zero", j + 1)));
            }
            let s = 1.0 / ss.sqrt();
            for i in 0..n {
                x.set(i, j, x.get(i, j) * s);
            }
        }
    }
    Ok(Dataset { x, y })
}

/// A parsed run configuration: the simulation settings plus output location.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfigFile {
    pub sim: SimConfig,
    pub output_dir: Option<PathBuf>,
}

const KNOWN_KEYS: &[&str] = &[
    "design",
    "n",
    "p",
    "lambda",
    "rho",
    "diagonal",
    "design_matrix",
    "normalize_columns",
    "beta",
    "beta_magnitude",
    "beta_s",
    "beta_values",
    "tau",
    "delta",
    "estimator",
    "k",
    "replicates",
    "seed",
    "theorem",
    "constant_mode",
    "proof_residual",
    "phi",
    "mu",
    "r",
    "output_dir",
];

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.map.remove(key)
    }

    fn required(&mut self, key: &str) -> Result<(usize, String)> {
        self.take(key)
            .ok_or_else(|| Error::parse(format!("key '{key}'"), "required key is missing"))
    }

    fn num<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|_| {
                Error::parse(format!("line {line}, key '{key}'"), format!("cannot parse '{v}'"))
            }),
        }
    }

    fn required_num<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        self.num(key)?
            .ok_or_else(|| Error::parse(format!("key '{key}'"), "required key is missing"))
    }

    fn list(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.take(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|c| {
                    c.trim().parse::<f64>().map_err(|_| {
                        Error::parse(format!("line {line}, key '{key}'"), format!("cannot parse '{}'", c.trim()))
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }
}

fn missing(key: &str, context: &str) -> Error {
    Error::parse(format!("key '{key}'"), format!("required when {context}"))
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Parses flat `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::parse(format!("line {line_no}"), format!("expected 'key = value', found '{line}'"))
            })?;
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(Error::parse(format!("line {line_no}"), format!("unknown key '{key}'")));
            }
            if map.insert(key.to_string(), (line_no, value.trim().to_string())).is_some() {
                return Err(Error::parse(format!("line {line_no}"), format!("duplicate key '{key}'")));
            }
        }
        let mut e = Entries { map };

        let n: usize = e.required_num("n")?;
        let p: usize = e.required_num("p")?;
        let (line, design) = e.required("design")?;
        let kind = match design.as_str() {
            "identity" => DesignKind::Identity,
            "rank_one" => DesignKind::RankOne {
                lambda: e.num("lambda")?.ok_or_else(|| missing("lambda", "design = rank_one"))?,
            },
            "ar1" => DesignKind::Ar1 {
                rho: e.num("rho")?.ok_or_else(|| missing("rho", "design = ar1"))?,
            },
            "diagonal" => DesignKind::Diagonal(
                e.list("diagonal")?.ok_or_else(|| missing("diagonal", "design = diagonal"))?,
            ),
            "custom" => {
                let values = e
                    .list("design_matrix")?
                    .ok_or_else(|| missing("design_matrix", "design = custom"))?;
                if values.len() != p * p {
                    return Err(Error::parse(
                        "key 'design_matrix'",
                        format!("expected {} row-major entries for p = {p}, found {}", p * p, values.len()),
                    ));
                }
                DesignKind::Custom(SymMatrix::from_row_major(p, values)?)
            }
            other => {
                return Err(Error::parse(
                    format!("line {line}, key 'design'"),
                    format!("unknown design '{other}'"),
                ))
            }
        };
        let normalize_columns = match e.take("normalize_columns") {
            None => false,
            Some((line, v)) => parse_bool(&v)
                .ok_or_else(|| Error::parse(format!("line {line}, key 'normalize_columns'"), format!("'{v}' is not a boolean")))?,
        };

        let (line, beta) = e.required("beta")?;
        let beta = match beta.as_str() {
            "zero" => BetaSpec::Zero,
            "in_span_sigma" => BetaSpec::InSpanSigma {
                magnitude: e.num("beta_magnitude")?.ok_or_else(|| missing("beta_magnitude", "beta = in_span_sigma"))?,
            },
            "sparse" => BetaSpec::Sparse {
                s: e.num("beta_s")?.ok_or_else(|| missing("beta_s", "beta = sparse"))?,
                magnitude: e.num("beta_magnitude")?.ok_or_else(|| missing("beta_magnitude", "beta = sparse"))?,
            },
            "explicit" => BetaSpec::Explicit(
                e.list("beta_values")?.ok_or_else(|| missing("beta_values", "beta = explicit"))?,
            ),
            other => {
                return Err(Error::parse(format!("line {line}, key 'beta'"), format!("unknown beta generator '{other}'")))
            }
        };

        let (line, est) = e.required("estimator")?;
        let estimator = match est.as_str() {
            "pls_k" => EstimatorKind::PlsK(e.num("k")?.ok_or_else(|| missing("k", "estimator = pls_k"))?),
            "single" => EstimatorKind::Single,
            "thresholded" => EstimatorKind::Thresholded,
            "spls" => EstimatorKind::Spls,
            "alt" => EstimatorKind::Alt,
            other => {
                return Err(Error::parse(format!("line {line}, key 'estimator'"), format!("unknown estimator '{other}'")))
            }
        };

        let tau = e.required_num("tau")?;
        let delta = e.required_num("delta")?;
        let replicates = e.required_num("replicates")?;
        let seed = e.required_num("seed")?;
        let theorem = match e.take("theorem") {
            None => None,
            Some((_, v)) => Some(v.parse::<Theorem>()?),
        };
        let mut constant_mode = match e.take("constant_mode") {
            None => ConstantMode::PROOF,
            Some((_, v)) => v.parse::<ConstantMode>()?,
        };
        if let Some(residual) = e.num::<f64>("proof_residual")? {
            match constant_mode {
                ConstantMode::Proof { .. } => constant_mode = ConstantMode::Proof { residual },
                ConstantMode::Calibrated(_) => {
                    return Err(Error::parse("key 'proof_residual'", "only valid with constant_mode = proof"))
                }
            }
        }
        let phi = e.num("phi")?;
        let mu = e.num("mu")?;
        let r = e.num("r")?;
        let output_dir = e.take("output_dir").map(|(_, v)| PathBuf::from(v));

        // keys that only apply to other variants
        if let Some((key, (line, _))) = e.map.iter().next() {
            return Err(Error::parse(
                format!("line {line}"),
                format!("key '{key}' does not apply to this configuration"),
            ));
        }

        let sim = SimConfig {
            design: DesignSpec { kind, n, p, normalize_columns },
            beta,
            tau,
            delta,
            estimator,
            replicates,
            seed,
            theorem,
            constant_mode,
            phi,
            mu,
            r,
        };
        sim.validate()?;
        Ok(RunConfigFile { sim, output_dir })
    }

    /// Canonical text form; parsing it yields the same configuration.
    pub fn serialize(&self) -> String {
        let s = &self.sim;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        let (design, extra): (&str, Option<(&str, String)>) = match &s.design.kind {
            DesignKind::Identity => ("identity", None),
            DesignKind::RankOne { lambda } => ("rank_one", Some(("lambda", lambda.to_string()))),
            DesignKind::Ar1 { rho } => ("ar1", Some(("rho", rho.to_string()))),
            DesignKind::Diagonal(v) => ("diagonal", Some(("diagonal", join(v)))),
            DesignKind::Custom(m) => ("custom", Some(("design_matrix", join(m.to_dense().as_slice())))),
        };
        put("design", design.to_string());
        put("n", s.design.n.to_string());
        put("p", s.design.p.to_string());
        if let Some((k, v)) = extra {
            put(k, v);
        }
        put("normalize_columns", s.design.normalize_columns.to_string());
        match &s.beta {
            BetaSpec::Zero => put("beta", "zero".into()),
            BetaSpec::InSpanSigma { magnitude } => {
                put("beta", "in_span_sigma".into());
                put("beta_magnitude", magnitude.to_string());
            }
            BetaSpec::Sparse { s: k, magnitude } => {
                put("beta", "sparse".into());
                put("beta_s", k.to_string());
                put("beta_magnitude", magnitude.to_string());
            }
            BetaSpec::Explicit(v) => {
                put("beta", "explicit".into());
                put("beta_values", join(v));
            }
        }
        put("tau", s.tau.to_string());
        put("delta", s.delta.to_string());
        match s.estimator {
            EstimatorKind::PlsK(k) => {
                put("estimator", "pls_k".into());
                put("k", k.to_string());
            }
            other => put("estimator", estimator_name(other).into()),
        }
        put("replicates", s.replicates.to_string());
        put("seed", s.seed.to_string());
        if let Some(t) = s.theorem {
            put("theorem", t.to_string());
        }
        put("constant_mode", s.constant_mode.to_string());
        if let ConstantMode::Proof { residual } = s.constant_mode {
            if residual != 1.0 {
                put("proof_residual", residual.to_string());
            }
        }
        for (k, v) in [("phi", s.phi), ("mu", s.mu), ("r", s.r)] {
            if let Some(v) = v {
                put(k, v.to_string());
            }
        }
        if let Some(dir) = &self.output_dir {
            put("output_dir", dir.display().to_string());
        }
        out
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn estimator_name(e: EstimatorKind) -> &'static str {
    match e {
        EstimatorKind::PlsK(_) => "pls_k",
        EstimatorKind::Single => "single",
        EstimatorKind::Thresholded => "thresholded",
        EstimatorKind::Spls => "spls",
        EstimatorKind::Alt => "alt",
    }
}

/// JSON number for finite values; `"inf"`, `"-inf"` or `"nan"` otherwise.
pub fn json_f64(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v.is_nan() {
        json!("nan")
    } else if v > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

pub fn json_vec(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|x| json_f64(*x)).collect())
}

pub fn bound_json(b: &BoundReport) -> Value {
    json!({
        "theorem": b.theorem.as_str(),
        "constant_mode": b.constant_mode.to_string(),
        "constant": json_f64(b.constant),
        "bias": json_f64(b.bias),
        "variance": json_f64(b.variance),
        "rhs": json_f64(b.rhs),
        "degenerate": b.degenerate,
        "event_flags": b.event_flags,
    })
}

/// `summary.json` content.
pub fn summary_json(summary: &SimSummary, config: &RunConfigFile) -> Value {
    let rates: Map<String, Value> = summary
        .deviation_event_rates
        .iter()
        .map(|(k, v)| (k.clone(), json_f64(*v)))
        .collect();
    json!({
        "theorem": summary.bound.theorem.as_str(),
        "constant_mode": summary.bound.constant_mode.to_string(),
        "coverage": json_f64(summary.coverage),
        "covered": summary.covered,
        "replicates": summary.replicates,
        "failed": summary.failed,
        "coverage_threshold": json_f64(crate::simulate::coverage_threshold(config.sim.delta, summary.replicates)),
        "mean_loss": json_f64(summary.mean_loss),
        "median_loss": json_f64(summary.median_loss),
        "deviation_event_rates": rates,
        "bound": bound_json(&summary.bound),
        "mu": json_f64(summary.mu),
        "signal_condition": summary.signal_condition,
        "config": config.serialize(),
        "replicates_table": "replicates.csv",
    })
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::invalid(format!("cannot serialize JSON: {e}")))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

pub fn write_replicates_csv<W: std::io::Write>(out: W, records: &[ReplicateRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io_err = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    w.write_record(REPLICATE_HEADER).map_err(io_err)?;
    for r in records {
        let row = [
            r.rep.to_string(),
            r.loss.to_string(),
            r.rhs.to_string(),
            flag(r.covered).to_string(),
            flag(r.a[0]).to_string(),
            flag(r.a[1]).to_string(),
            flag(r.a[2]).to_string(),
            flag(r.m).to_string(),
            flag(r.b[0]).to_string(),
            flag(r.b[1]).to_string(),
            flag(r.b[2]).to_string(),
        ];
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `summary.json` and `replicates.csv` into `dir`.
pub fn write_simulation(dir: &Path, summary: &SimSummary, config: &RunConfigFile) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("summary.json"), &summary_json(summary, config))?;
    write_replicates_csv(fs::File::create(dir.join("replicates.csv"))?, &summary.records)
}

/// Output of a single `fit` run.
#[derive(Debug, Clone)]
pub struct ResultRecord {
    pub run_id: String,
    pub config: BTreeMap<String, String>,
    pub beta_hat: Vec<f64>,
    pub diagnostics: Value,
    pub bound: Option<BoundReport>,
    pub replicate_table: Option<String>,
}

impl ResultRecord {
    pub fn to_json(&self) -> Value {
        json!({
            "run_id": self.run_id,
            "config": self.config,
            "beta_hat": json_vec(&self.beta_hat),
            "diagnostics": self.diagnostics,
            "bound": self.bound.as_ref().map(bound_json),
            "replicate_table": self.replicate_table,
        })
    }
}
