//! Command-line surface: `fit` on long-format CSV data and `simulate` for the
//! Monte Carlo scenarios. Both write a JSON result document and print a table.
//!
//! Exit status: 0 on success, 1 when a fit fails, does not converge or a
//! method fails on every replicate, 2 for invalid input.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::json;

use crate::correlation::{CorrelationKind, CorrelationSpec};
use crate::estimator::{fit_gee1, fit_gee15, wald_intervals_using, Gee15Options, GeeFit, SeKind};
use crate::model::{ClusterData, Covariate, MeanModelSpec};
use crate::reduction::{average_ear, worse_ear};
use crate::simulation::{run_scenario, Method, RunOptions, ScenarioReport, SimulationScenario};

pub const SCHEMA_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "bilateral-gee",
    version,
    about = "GEE for bilateral multi-frequency outcomes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a marginal model to long-format CSV data.
    Fit(FitArgs),
    /// Run a simulation scenario.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrArg {
    Independence,
    Exchangeable,
    Unstructured,
    EarFreq,
}

impl From<CorrArg> for CorrelationKind {
    fn from(c: CorrArg) -> Self {
        match c {
            CorrArg::Independence => CorrelationKind::Independence,
            CorrArg::Exchangeable => CorrelationKind::Exchangeable,
            CorrArg::Unstructured => CorrelationKind::Unstructured,
            CorrArg::EarFreq => CorrelationKind::EarFreq,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    Worse,
    Average,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SeArg {
    Sandwich,
    Naive,
}

impl From<SeArg> for SeKind {
    fn from(s: SeArg) -> Self {
        match s {
            SeArg::Sandwich => SeKind::Sandwich,
            SeArg::Naive => SeKind::Naive,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    /// CSV with columns participant_id, ear, freq, y and covariates.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub corr: CorrArg,
    /// One or more of worse, average, both.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "both")]
    pub method: Vec<FitMethod>,
    /// Number of frequency levels; defaults to the largest freq in the data.
    #[arg(long)]
    pub freq_levels: Option<usize>,
    /// Covariate columns to use; defaults to every extra column.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    /// Covariates interacted with frequency.
    #[arg(long, value_delimiter = ',')]
    pub interact: Vec<String>,
    /// Covariates measured per ear (the rest are per participant).
    #[arg(long, value_delimiter = ',')]
    pub ear_covs: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional CSV export of the coefficient table.
    #[arg(long)]
    pub table_csv: Option<PathBuf>,
    /// Confidence level of the Wald intervals.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Standard error used for the intervals.
    #[arg(long, value_enum, default_value = "sandwich")]
    pub ci_se: SeArg,
    /// Run exactly this many GEE1.5 rounds instead of iterating to stability.
    #[arg(long)]
    pub gee15_rounds: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, required_unless_present = "scenario_file", conflicts_with = "scenario_file",
          value_parser = clap::value_parser!(u8).range(1..=4))]
    pub scenario: Option<u8>,
    /// JSON scenario definition; --n, --reps and --seed override its values.
    #[arg(long)]
    pub scenario_file: Option<PathBuf>,
    /// Participants per replicate [default: 200].
    #[arg(long)]
    pub n: Option<usize>,
    /// Replicates [default: 1000].
    #[arg(long)]
    pub reps: Option<usize>,
    /// Base seed [default: 1].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated methods; defaults to all six.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub table_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, value_enum, default_value = "sandwich")]
    pub ci_se: SeArg,
    #[arg(long)]
    pub gee15_rounds: Option<usize>,
    /// Worker threads; defaults to the available parallelism. Results do not
    /// depend on it.
    #[arg(long)]
    #[serde(skip)]
    pub threads: Option<usize>,
}

#[derive(Debug)]
struct InvalidInput(String);

impl std::fmt::Display for InvalidInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn invalid(msg: impl Into<String>) -> InvalidInput {
    InvalidInput(msg.into())
}

/// Parses arguments and runs the command, printing tables to `stdout` and
/// errors to `stderr`. Returns the exit status.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                EXIT_INVALID
            } else {
                EXIT_OK
            };
            let rendered = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(stderr, "{rendered}");
            } else {
                let _ = write!(stdout, "{rendered}");
            }
            return code;
        }
    };
    let result = match &cli.command {
        Command::Fit(a) => fit_command(a, stdout),
        Command::Simulate(a) => simulate_command(a, stdout),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_INVALID
        }
    }
}

/// Long-format data grouped into clusters.
#[derive(Debug, Clone)]
pub struct LongData {
    pub covariate_names: Vec<String>,
    pub clusters: Vec<ClusterData>,
    pub max_freq: usize,
}

const REQUIRED: [&str; 4] = ["participant_id", "ear", "freq", "y"];

/// Reads `participant_id, ear, freq, y, <covariates...>` rows. Clusters are
/// returned in order of first appearance.
pub fn read_long_csv(
    path: &Path,
    covariates: Option<&[String]>,
) -> std::result::Result<LongData, String> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    let headers = reader
        .headers()
        .map_err(|e| format!("{}: {e}", path.display()))?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(format!("{}: empty data file", path.display()));
    }
    let column = |name: &str| headers.iter().position(|h| h == name);
    let mut idx = [0usize; 4];
    for (k, name) in REQUIRED.iter().enumerate() {
        idx[k] = column(name).ok_or_else(|| format!("missing required column '{name}'"))?;
    }
    let covariate_names: Vec<String> = match covariates {
        Some(list) => list.to_vec(),
        None => headers
            .iter()
            .filter(|h| !REQUIRED.contains(h))
            .map(str::to_string)
            .collect(),
    };
    let cov_idx = covariate_names
        .iter()
        .map(|c| column(c).ok_or_else(|| format!("unknown column '{c}'")))
        .collect::<std::result::Result<Vec<_>, _>>()?;

    struct Rows {
        y: Vec<f64>,
        x: Vec<f64>,
        ear: Vec<usize>,
        freq: Vec<usize>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Rows> = HashMap::new();
    let mut max_freq = 0;
    for record in reader.records() {
        let record = record.map_err(|e| match e.position() {
            Some(p) => format!("line {}: {e}", p.line()),
            None => e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize, name: &str| -> std::result::Result<&str, String> {
            record
                .get(i)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| format!("line {line}: missing value for '{name}'"))
        };
        let int = |i: usize, name: &str| -> std::result::Result<usize, String> {
            let s = field(i, name)?;
            s.parse::<usize>()
                .map_err(|_| format!("line {line}: '{name}' must be a positive integer, got '{s}'"))
        };
        let num = |i: usize, name: &str| -> std::result::Result<f64, String> {
            let s = field(i, name)?;
            match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(format!(
                    "line {line}: '{name}' must be a finite number, got '{s}'"
                )),
            }
        };
        let id = field(idx[0], "participant_id")?.to_string();
        let ear = int(idx[1], "ear")?;
        if ear != 1 && ear != 2 {
            return Err(format!("line {line}: ear must be 1 or 2, got {ear}"));
        }
        let freq = int(idx[2], "freq")?;
        if freq == 0 {
            return Err(format!("line {line}: freq must be >= 1"));
        }
        let y = num(idx[3], "y")?;
        let xs = cov_idx
            .iter()
            .zip(&covariate_names)
            .map(|(&i, n)| num(i, n))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        max_freq = max_freq.max(freq);
        let rows = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Rows {
                y: Vec::new(),
                x: Vec::new(),
                ear: Vec::new(),
                freq: Vec::new(),
            }
        });
        rows.y.push(y);
        rows.x.extend(xs);
        rows.ear.push(ear);
        rows.freq.push(freq);
    }
    if order.is_empty() {
        return Err(format!("{}: no data rows", path.display()));
    }
    let p = covariate_names.len();
    let clusters = order
        .into_iter()
        .map(|id| {
            let rows = groups.remove(&id).expect("grouped");
            let x = DMatrix::from_row_slice(rows.y.len(), p, &rows.x);
            ClusterData::new(id, rows.y, x, rows.ear, rows.freq).map_err(|e| e.to_string())
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(LongData {
        covariate_names,
        clusters,
        max_freq,
    })
}

#[derive(Debug, Serialize)]
struct CoefficientRecord {
    name: String,
    estimate: f64,
    se: f64,
    sandwich_se: f64,
    naive_se: f64,
    ci_low: f64,
    ci_high: f64,
}

#[derive(Debug, Serialize)]
struct FitRecord {
    method: FitMethod,
    correlation: CorrelationKind,
    status: &'static str,
    error: Option<String>,
    converged: bool,
    iterations: usize,
    rounds: usize,
    score_norm: f64,
    dispersion: f64,
    n_clusters: usize,
    n_observations: usize,
    working_correlation: serde_json::Value,
    alpha_solver: Option<serde_json::Value>,
    coefficients: Vec<CoefficientRecord>,
    warnings: Vec<String>,
}

fn correlation_json(spec: &CorrelationSpec) -> serde_json::Value {
    match spec {
        CorrelationSpec::Independence => json!({"kind": "independence"}),
        CorrelationSpec::Exchangeable { rho } => json!({"kind": "exchangeable", "rho": rho}),
        CorrelationSpec::Unstructured { matrix } => {
            let rows: Vec<Vec<f64>> = matrix
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect();
            json!({"kind": "unstructured", "matrix": rows})
        }
        CorrelationSpec::EarFreq(a) => json!({
            "kind": "ear-freq",
            "alpha0": a.alpha0,
            "alpha_ear": a.alpha_ear,
            "alpha_freq": a.alpha_freq,
        }),
    }
}

fn fit_record(
    method: FitMethod,
    kind: CorrelationKind,
    fit: &GeeFit,
    level: f64,
    se: SeKind,
) -> FitRecord {
    let sandwich = fit.sandwich_se();
    let naive = fit.naive_se();
    let (coefficients, ci_error) = match wald_intervals_using(fit, level, se) {
        Ok(ci) => (
            ci.into_iter()
                .enumerate()
                .map(|(j, w)| CoefficientRecord {
                    name: w.name,
                    estimate: w.estimate,
                    se: w.se,
                    sandwich_se: sandwich[j],
                    naive_se: naive[j],
                    ci_low: w.lower,
                    ci_high: w.upper,
                })
                .collect(),
            None,
        ),
        Err(e) => (Vec::new(), Some(e.to_string())),
    };
    let status = if !fit.converged || ci_error.is_some() {
        "not_converged"
    } else {
        "ok"
    };
    FitRecord {
        method,
        correlation: kind,
        status,
        error: ci_error.or_else(|| {
            (!fit.converged).then(|| {
                format!(
                    "mean model did not converge after {} iterations (|U|inf = {:e})",
                    fit.iterations, fit.final_score_norm
                )
            })
        }),
        converged: fit.converged,
        iterations: fit.iterations,
        rounds: fit.rounds,
        score_norm: fit.final_score_norm,
        dispersion: fit.dispersion_hat,
        n_clusters: fit.n_clusters,
        n_observations: fit.n_observations,
        working_correlation: correlation_json(&fit.correlation),
        alpha_solver: fit.alpha.map(|a| {
            json!({
                "eta": a.eta.eta,
                "iterations": a.iterations,
                "residual_norm": a.residual_norm,
                "score_norm": a.score_norm,
            })
        }),
        coefficients,
        warnings: fit.warnings.clone(),
    }
}

fn failed_record(method: FitMethod, kind: CorrelationKind, error: String) -> FitRecord {
    FitRecord {
        method,
        correlation: kind,
        status: "error",
        error: Some(error),
        converged: false,
        iterations: 0,
        rounds: 0,
        score_norm: f64::NAN,
        dispersion: f64::NAN,
        n_clusters: 0,
        n_observations: 0,
        working_correlation: serde_json::Value::Null,
        alpha_solver: None,
        coefficients: Vec::new(),
        warnings: Vec::new(),
    }
}

fn run_fit(
    method: FitMethod,
    kind: CorrelationKind,
    clusters: &[ClusterData],
    model: &MeanModelSpec,
    options: &Gee15Options,
) -> crate::error::Result<GeeFit> {
    let reduced: Vec<ClusterData>;
    let data = match method {
        FitMethod::Both => clusters,
        FitMethod::Worse | FitMethod::Average => {
            let f = if method == FitMethod::Worse {
                worse_ear
            } else {
                average_ear
            };
            reduced = clusters
                .iter()
                .map(|c| f(c).map(|r| r.to_cluster()))
                .collect::<crate::error::Result<_>>()?;
            &reduced
        }
    };
    match kind {
        CorrelationKind::EarFreq => fit_gee15(data, model, options),
        other => fit_gee1(data, model, other, &options.gee),
    }
}

fn gee15_options(rounds: Option<usize>) -> std::result::Result<Gee15Options, InvalidInput> {
    if rounds == Some(0) {
        return Err(invalid("--gee15-rounds must be at least 1"));
    }
    Ok(Gee15Options {
        exact_rounds: rounds,
        ..Gee15Options::default()
    })
}

fn check_level(level: f64) -> std::result::Result<(), InvalidInput> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("--level must lie in (0,1), got {level}")))
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> std::result::Result<(), InvalidInput> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn write_table_csv(
    path: &Path,
    header: &[&str],
    rows: &[Vec<String>],
) -> std::result::Result<(), InvalidInput> {
    let io = |e: csv::Error| invalid(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.flush()
        .map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

fn fit_command(args: &FitArgs, stdout: &mut dyn Write) -> std::result::Result<i32, InvalidInput> {
    check_level(args.level)?;
    let options = gee15_options(args.gee15_rounds)?;
    let kind = CorrelationKind::from(args.corr);
    if kind == CorrelationKind::EarFreq && args.method.iter().any(|m| *m != FitMethod::Both) {
        return Err(invalid(
            "--corr ear-freq needs both ears; use it with --method both only",
        ));
    }
    let mut methods = args.method.clone();
    methods.dedup();

    let data = read_long_csv(&args.data, args.covariates.as_deref()).map_err(InvalidInput)?;
    for name in args.interact.iter().chain(&args.ear_covs) {
        if !data.covariate_names.contains(name) {
            return Err(invalid(format!("unknown column '{name}'")));
        }
    }
    let q = args.freq_levels.unwrap_or(data.max_freq);
    if q == 0 {
        return Err(invalid("--freq-levels must be at least 1"));
    }
    let covariates = data
        .covariate_names
        .iter()
        .map(|n| {
            let interact = args.interact.contains(n);
            if args.ear_covs.contains(n) {
                Covariate::ear(n.clone(), interact)
            } else {
                Covariate::participant(n.clone(), interact)
            }
        })
        .collect();
    let model = MeanModelSpec::new(q, covariates);

    let mut records = Vec::new();
    for &method in &methods {
        let record = match run_fit(method, kind, &data.clusters, &model, &options) {
            Ok(fit) => fit_record(method, kind, &fit, args.level, args.ci_se.into()),
            Err(e @ crate::error::GeeError::UnknownFrequency { .. })
            | Err(e @ crate::error::GeeError::MissingEar { .. })
            | Err(e @ crate::error::GeeError::InvalidCluster { .. }) => {
                return Err(invalid(e.to_string()))
            }
            Err(e) => failed_record(method, kind, e.to_string()),
        };
        records.push(record);
    }
    let all_ok = records.iter().all(|r| r.status == "ok");
    let doc = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "fit",
        "config": {
            "data": args.data,
            "corr": args.corr,
            "method": methods,
            "freq_levels": q,
            "covariates": data.covariate_names,
            "interact": args.interact,
            "ear_covs": args.ear_covs,
            "level": args.level,
            "ci_se": args.ci_se,
            "gee15_rounds": args.gee15_rounds,
            "gee15_options": options,
        },
        "status": if all_ok { "ok" } else { "error" },
        "n_participants": data.clusters.len(),
        "fits": records,
    });
    write_json(&args.out, &doc)?;

    if let Some(path) = &args.table_csv {
        let rows: Vec<Vec<String>> = records
            .iter()
            .flat_map(|r| {
                r.coefficients.iter().map(move |c| {
                    vec![
                        format!("{} ({})", method_name(r.method), kind.as_str()),
                        c.name.clone(),
                        fmt_num(c.estimate),
                        fmt_num(c.se),
                        fmt_num(c.ci_low),
                        fmt_num(c.ci_high),
                    ]
                })
            })
            .collect();
        write_table_csv(
            path,
            &[
                "method",
                "coefficient",
                "estimate",
                "se",
                "ci_low",
                "ci_high",
            ],
            &rows,
        )?;
    }
    let _ = stdout.write_all(render_fit_table(&records, kind, args.level).as_bytes());
    Ok(if all_ok { EXIT_OK } else { EXIT_FAILURE })
}

fn method_name(m: FitMethod) -> &'static str {
    match m {
        FitMethod::Worse => "worse",
        FitMethod::Average => "average",
        FitMethod::Both => "both",
    }
}

fn render_fit_table(records: &[FitRecord], kind: CorrelationKind, level: f64) -> String {
    let mut out = String::new();
    let pct = level * 100.0;
    for r in records {
        let _ = writeln!(
            out,
            "{} ear, {} correlation: {}",
            method_name(r.method),
            kind.as_str(),
            r.status
        );
        if let Some(e) = &r.error {
            let _ = writeln!(out, "  {e}");
        }
        if !r.coefficients.is_empty() {
            let _ = writeln!(
                out,
                "  {:<24} {:>22} {:>26}",
                "coefficient",
                "estimate (SE)",
                format!("{pct}% CI")
            );
            for c in &r.coefficients {
                let _ = writeln!(
                    out,
                    "  {:<24} {:>22} {:>26}",
                    c.name,
                    format!("{:.3} ({:.3})", c.estimate, c.se),
                    format!("({:.3}, {:.3})", c.ci_low, c.ci_high)
                );
            }
        }
        if let Some(a) = r.working_correlation.as_object() {
            if a.get("kind").and_then(|k| k.as_str()) == Some("ear-freq") {
                let _ = writeln!(
                    out,
                    "  alpha0 = {:.4}, alpha_ear = {:.4}, alpha_freq = {:.4}",
                    a["alpha0"].as_f64().unwrap_or(f64::NAN),
                    a["alpha_ear"].as_f64().unwrap_or(f64::NAN),
                    a["alpha_freq"].as_f64().unwrap_or(f64::NAN)
                );
            }
        }
        for w in &r.warnings {
            let _ = writeln!(out, "  warning: {w}");
        }
    }
    out
}

fn resolve_scenario(args: &SimulateArgs) -> std::result::Result<SimulationScenario, InvalidInput> {
    let mut scenario = match (args.scenario, &args.scenario_file) {
        (Some(id), None) => SimulationScenario::preset(
            id,
            args.n.unwrap_or(200),
            args.reps.unwrap_or(1000),
            args.seed.unwrap_or(1),
        )
        .map_err(|e| invalid(e.to_string()))?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            let mut s: SimulationScenario = serde_json::from_str(&text)
                .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            if let Some(n) = args.n {
                s.n_participants = n;
            }
            if let Some(r) = args.reps {
                s.n_replicates = r;
            }
            if let Some(seed) = args.seed {
                s.base_seed = seed;
            }
            s
        }
        _ => {
            return Err(invalid(
                "give exactly one of --scenario and --scenario-file",
            ))
        }
    };
    scenario.validate().map_err(|e| invalid(e.to_string()))?;
    if scenario.name.is_empty() {
        scenario.name = "custom".into();
    }
    Ok(scenario)
}

fn simulate_command(
    args: &SimulateArgs,
    stdout: &mut dyn Write,
) -> std::result::Result<i32, InvalidInput> {
    check_level(args.level)?;
    if args.threads == Some(0) {
        return Err(invalid("--threads must be at least 1"));
    }
    let gee15 = gee15_options(args.gee15_rounds)?;
    let scenario = resolve_scenario(args)?;
    let methods: Vec<Method> = match &args.methods {
        None => Method::ALL.to_vec(),
        Some(list) => {
            let mut ms = Vec::new();
            for s in list {
                let m: Method = s
                    .parse()
                    .map_err(|e: crate::error::GeeError| invalid(e.to_string()))?;
                if !ms.contains(&m) {
                    ms.push(m);
                }
            }
            ms
        }
    };
    let options = RunOptions {
        threads: args.threads,
        ci_level: args.level,
        ci_se: args.ci_se.into(),
        gee15,
    };
    let report = run_scenario(&scenario, &methods, &options).map_err(|e| invalid(e.to_string()))?;
    let all_failed: Vec<&str> = report
        .characteristics
        .iter()
        .filter(|c| c.n_used == 0)
        .map(|c| c.method.as_str())
        .collect();
    let status = if all_failed.is_empty() { "ok" } else { "error" };
    let doc = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "simulate",
        "config": {
            "scenario_id": args.scenario,
            "scenario_file": args.scenario_file,
            "scenario": scenario,
            "seed": scenario.base_seed,
            "methods": methods,
            "level": args.level,
            "ci_se": args.ci_se,
            "gee15_rounds": args.gee15_rounds,
            "gee15_options": gee15,
        },
        "status": status,
        "error": if all_failed.is_empty() {
            serde_json::Value::Null
        } else {
            json!(format!("failed on every replicate: {}", all_failed.join(", ")))
        },
        "results": {
            "characteristics": report.characteristics,
            "warnings": report.warnings,
        },
    });
    write_json(&args.out, &doc)?;
    if let Some(path) = &args.table_csv {
        let rows: Vec<Vec<String>> = report
            .characteristics
            .iter()
            .flat_map(|oc| {
                oc.coefficients.iter().map(move |c| {
                    vec![
                        oc.method.as_str().to_string(),
                        c.label.clone(),
                        fmt_num(c.relative_bias_pct),
                        fmt_num(c.ese),
                        fmt_num(c.coverage_rate_pct),
                        c.relative_efficiency.map(fmt_num).unwrap_or_default(),
                    ]
                })
            })
            .collect();
        write_table_csv(
            path,
            &[
                "method",
                "coefficient",
                "rel_bias_pct",
                "ese",
                "cr_pct",
                "rel_eff",
            ],
            &rows,
        )?;
    }
    let _ = stdout.write_all(render_simulation_tables(&report).as_bytes());
    Ok(if all_failed.is_empty() {
        EXIT_OK
    } else {
        EXIT_FAILURE
    })
}

/// Bias/ESE/CR table followed by the relative-efficiency table.
pub fn render_simulation_tables(report: &ScenarioReport) -> String {
    let sc = &report.scenario;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{}: n = {}, replicates = {}, seed = {}",
        sc.name, sc.n_participants, sc.n_replicates, sc.base_seed
    );
    let labels = crate::simulation::COEFFICIENT_LABELS;
    let _ = write!(out, "{:<20}", "method");
    for l in labels {
        let _ = write!(out, " | {:^24}", l);
    }
    let _ = writeln!(out, " | failed");
    let _ = write!(out, "{:<20}", "");
    for _ in labels {
        let _ = write!(out, " | {:>8} {:>7} {:>7}", "RB%", "ESE", "CR");
    }
    let _ = writeln!(out, " |");
    for oc in &report.characteristics {
        let _ = write!(out, "{:<20}", oc.method.label());
        for l in labels {
            match oc.coefficient(l) {
                Some(c) => {
                    let _ = write!(
                        out,
                        " | {:>8.1} {:>7.3} {:>7.1}",
                        c.relative_bias_pct, c.ese, c.coverage_rate_pct
                    );
                }
                None => {
                    let _ = write!(out, " | {:>24}", "-");
                }
            }
        }
        let _ = writeln!(out, " | {}", oc.n_failed);
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "relative efficiency (ESE proposed / ESE method)");
    let _ = write!(out, "{:<20}", "method");
    for l in labels {
        let _ = write!(out, " {:>7}", l);
    }
    let _ = writeln!(out);
    for oc in &report.characteristics {
        let _ = write!(out, "{:<20}", oc.method.label());
        for l in labels {
            let re = oc.coefficient(l).and_then(|c| c.relative_efficiency);
            match re {
                Some(v) => {
                    let _ = write!(out, " {:>7.3}", v);
                }
                None => {
                    let _ = write!(out, " {:>7}", "-");
                }
            }
        }
        let _ = writeln!(out);
    }
    for w in &report.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    out
}
