//! `mnar`: simulate benchmark scenarios, estimate average effects on CSV
//! data, and audit discrete identifiability.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use mnar_core::data::Dataset;
use mnar_core::discrete::{check_identifiability, discrete_tau, recover_joint, solve_xi, DiscreteJoint};
use mnar_core::estimators::parametric::{fit_mle_fractional, param_tau, FiConfig, ParamModelSpec};
use mnar_core::estimators::{
    bootstrap_ci, gpsw, nonpara_tau_with, unadjusted, EstimateResult, NonparaConfig,
};
use mnar_core::sim::{run_monte_carlo, Method, Scenario, ScenarioConfig};
use mnar_core::smooth::TuningStore;
use mnar_core::Error as CoreError;

#[derive(Parser)]
#[command(name = "mnar", version, about = "Causal effect estimation with MNAR confounders")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a Monte Carlo study on a built-in scenario.
    Simulate(SimulateArgs),
    /// Estimate the average effect on a CSV dataset.
    Estimate(EstimateArgs),
    /// Audit identifiability of a discrete (integer-coded) CSV dataset.
    Identify(IdentifyArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Json,
    Table,
    Csv,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed (falls back to the MNAR_SEED environment variable).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: logical cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Scenario A (three covariates, one MNAR) or B (six covariates, two MNAR).
    #[arg(long)]
    scenario: Option<Scenario>,
    /// Comma-separated subset of unadj,gpsw,nonpara,para.
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    /// Monte Carlo repetitions.
    #[arg(long)]
    reps: Option<usize>,
    /// Bootstrap replicates per repetition (0 disables intervals).
    #[arg(long)]
    boot: Option<usize>,
    /// Series basis size for the nonparametric estimator.
    #[arg(long = "J")]
    j: Option<usize>,
    /// Smoothness bound for the nonparametric estimator.
    #[arg(long = "B")]
    b: Option<f64>,
    /// Imputations per incomplete unit for the parametric estimator.
    #[arg(long)]
    m: Option<usize>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// CSV with header a,y,x1,..,xp; empty cells or NA mark missing covariates.
    #[arg(long)]
    data: Option<PathBuf>,
    /// One of unadj, gpsw, nonpara, para.
    #[arg(long)]
    method: Option<String>,
    /// Bootstrap replicates (0 disables the interval).
    #[arg(long)]
    boot: Option<usize>,
    #[arg(long = "J")]
    j: Option<usize>,
    #[arg(long = "B")]
    b: Option<f64>,
    #[arg(long)]
    m: Option<usize>,
}

#[derive(Args)]
struct IdentifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// CSV with integer-coded covariates and outcome.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Rank tolerance relative to the largest singular value.
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
}

/// Usage or config problem: reported on stderr with exit code 2.
struct UsageError(String);

/// Everything else that stops a run: exit code 1.
struct RunError(String);

enum CliError {
    Usage(UsageError),
    Run(RunError),
}

impl From<UsageError> for CliError {
    fn from(e: UsageError) -> Self {
        CliError::Usage(e)
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        CliError::Run(e)
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        // precondition and ingestion failures are the caller's to fix
        match e {
            CoreError::Parse { .. }
            | CoreError::Validation(_)
            | CoreError::Schema(_)
            | CoreError::InvalidArgument(_) => CliError::Usage(UsageError(e.to_string())),
            other => CliError::Run(RunError(other.to_string())),
        }
    }
}

fn usage<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Usage(UsageError(msg.into())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Simulate(args) => cmd_simulate(args),
        Cmd::Estimate(args) => cmd_estimate(args),
        Cmd::Identify(args) => cmd_identify(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(UsageError(msg))) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Run(RunError(msg))) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

/// Flat JSON config file; flags take precedence over its keys.
struct FileConfig(BTreeMap<String, Value>);

impl FileConfig {
    fn load(path: Option<&Path>, allowed: &[&str]) -> Result<FileConfig, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig(BTreeMap::new()));
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
        let Value::Object(map) = value else {
            return usage(format!("config {}: expected a JSON object", path.display()));
        };
        for key in map.keys() {
            if !allowed.contains(&key.as_str()) {
                return usage(format!("config {}: unknown key `{key}`", path.display()));
            }
        }
        Ok(FileConfig(map.into_iter().collect()))
    }

    fn u64(&self, key: &str) -> Result<Option<u64>, CliError> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_u64()
                .map(Some)
                .ok_or_else(|| UsageError(format!("config key `{key}` must be an integer")).into()),
        }
    }

    fn usize(&self, key: &str) -> Result<Option<usize>, CliError> {
        Ok(self.u64(key)?.map(|v| v as usize))
    }

    fn f64(&self, key: &str) -> Result<Option<f64>, CliError> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_f64()
                .map(Some)
                .ok_or_else(|| UsageError(format!("config key `{key}` must be a number")).into()),
        }
    }

    fn string(&self, key: &str) -> Result<Option<String>, CliError> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_str()
                .map(|s| Some(s.to_string()))
                .ok_or_else(|| UsageError(format!("config key `{key}` must be a string")).into()),
        }
    }
}

fn resolve_seed(flag: Option<u64>, file: &FileConfig) -> Result<Option<u64>, CliError> {
    if let Some(s) = flag {
        return Ok(Some(s));
    }
    if let Some(s) = file.u64("seed")? {
        return Ok(Some(s));
    }
    match std::env::var("MNAR_SEED") {
        Ok(v) => match v.parse() {
            Ok(s) => Ok(Some(s)),
            Err(_) => usage(format!("MNAR_SEED must be an unsigned integer, got `{v}`")),
        },
        Err(_) => Ok(None),
    }
}

fn set_jobs(jobs: Option<usize>) -> Result<(), CliError> {
    let Some(jobs) = jobs else { return Ok(()) };
    if jobs == 0 {
        return usage("--jobs must be positive");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .map_err(|e| RunError(format!("thread pool: {e}")).into())
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| RunError(format!("cannot write {}: {e}", path.display())).into()),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn parse_methods(s: &str) -> Result<Vec<Method>, CliError> {
    let mut methods = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        methods.push(part.parse::<Method>()?);
    }
    if methods.is_empty() {
        return usage("no methods given");
    }
    Ok(methods)
}

const SIMULATE_KEYS: &[&str] =
    &["scenario", "methods", "n", "reps", "boot", "seed", "jobs", "J", "B", "m", "format"];

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.common.config.as_deref(), SIMULATE_KEYS)?;
    let scenario = match args.scenario {
        Some(s) => s,
        None => match file.string("scenario")? {
            Some(s) => s.parse::<Scenario>()?,
            None => return usage("--scenario is required"),
        },
    };
    let Some(seed) = resolve_seed(args.common.seed, &file)? else {
        return usage("simulate needs a seed: --seed, config `seed`, or MNAR_SEED");
    };
    let n = args.n.or(file.usize("n")?).unwrap_or(400);
    let mut cfg = ScenarioConfig::new(scenario, n, seed);
    if let Some(spec) = match args.methods {
        Some(s) => Some(s),
        None => file.string("methods")?,
    } {
        cfg.methods = parse_methods(&spec)?;
    }
    if let Some(reps) = args.reps.or(file.usize("reps")?) {
        cfg.n_reps = reps;
    }
    if let Some(boot) = args.boot.or(file.usize("boot")?) {
        cfg.n_boot = boot;
    }
    if let Some(j) = args.j.or(file.usize("J")?) {
        cfg.nonpara.series.j = j;
    }
    if let Some(b) = args.b.or(file.f64("B")?) {
        cfg.nonpara.series.bound = b;
    }
    if let Some(m) = args.m.or(file.usize("m")?) {
        cfg.fi.m = m;
    }
    cfg.validate()?;
    set_jobs(args.common.jobs.or(file.usize("jobs")?))?;

    let resolved = json!({
        "command": "simulate",
        "scenario": cfg.scenario,
        "methods": cfg.methods,
        "n": cfg.n,
        "reps": cfg.n_reps,
        "boot": cfg.n_boot,
        "seed": cfg.seed,
        "level": cfg.level,
        "J": cfg.nonpara.series.j,
        "B": cfg.nonpara.series.bound,
        "m": cfg.fi.m,
    });
    let report = run_monte_carlo(&cfg)?;
    let format = resolve_format(args.common.format, &file)?;
    let text = match format {
        Format::Json => pretty(&json!({ "config": resolved, "report": report }))?,
        Format::Table => report.to_table(),
        Format::Csv => {
            let mut s = String::from("method,bias,variance,var_est,coverage,n_ok,failures\n");
            for m in &report.methods {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{}",
                    m.method,
                    m.bias,
                    m.variance,
                    m.var_est.map_or(String::new(), |v| v.to_string()),
                    m.coverage.map_or(String::new(), |v| v.to_string()),
                    m.n_ok,
                    m.failures
                );
            }
            s
        }
    };
    emit(args.common.out.as_deref(), &text)
}

const ESTIMATE_KEYS: &[&str] =
    &["data", "method", "boot", "seed", "jobs", "J", "B", "m", "format"];

fn cmd_estimate(args: EstimateArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.common.config.as_deref(), ESTIMATE_KEYS)?;
    let data = match args.data.or(file.string("data")?.map(PathBuf::from)) {
        Some(p) => p,
        None => return usage("--data is required"),
    };
    let method = match args.method.or(file.string("method")?) {
        Some(m) => m.parse::<Method>()?,
        None => return usage("--method is required"),
    };
    let seed = resolve_seed(args.common.seed, &file)?.unwrap_or(0);
    let n_boot = args.boot.or(file.usize("boot")?).unwrap_or(100);
    set_jobs(args.common.jobs.or(file.usize("jobs")?))?;

    let d = load_data(&data)?;
    let mut np = NonparaConfig::default();
    if let Some(j) = args.j.or(file.usize("J")?) {
        np.series.j = j;
    }
    if let Some(b) = args.b.or(file.f64("B")?) {
        np.series.bound = b;
    }
    let mut fi = FiConfig { max_iter: 500, seed, ..FiConfig::default() };
    if let Some(m) = args.m.or(file.usize("m")?) {
        fi.m = m;
    }
    np.series.cv.seed = seed;
    np.cate_cv.seed = seed.wrapping_add(1);
    if method == Method::Nonpara && d.p() > 3 {
        return usage(format!(
            "nonparametric estimator supports p <= 3 covariates, got {}; use --method para",
            d.p()
        ));
    }

    let level = 0.95;
    let mut result = run_estimator(method, &d, &np, &fi)?;
    if n_boot > 0 {
        let boot = bootstrap(method, &d, &np, &fi, n_boot, level, seed)?;
        result.se = Some(boot.0);
        result.ci = Some(boot.1);
    }

    let resolved = json!({
        "command": "estimate",
        "data": data,
        "method": method,
        "boot": n_boot,
        "seed": seed,
        "level": level,
        "J": np.series.j,
        "B": np.series.bound,
        "m": fi.m,
        "n": d.n(),
        "p": d.p(),
    });
    let format = resolve_format(args.common.format, &file)?;
    let text = match format {
        Format::Json => pretty(&json!({ "config": resolved, "result": result }))?,
        Format::Table => {
            let mut s = format!("method   {}\nestimate {:.6}\n", result.method, result.estimate);
            if let (Some(se), Some((lo, hi))) = (result.se, result.ci) {
                let _ = writeln!(s, "se       {se:.6}\nci       [{lo:.6}, {hi:.6}]");
            }
            s
        }
        Format::Csv => {
            let mut s = String::from("method,estimate,se,ci_lo,ci_hi\n");
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                result.method,
                result.estimate,
                result.se.map_or(String::new(), |v| v.to_string()),
                result.ci.map_or(String::new(), |c| c.0.to_string()),
                result.ci.map_or(String::new(), |c| c.1.to_string()),
            );
            s
        }
    };
    emit(args.common.out.as_deref(), &text)
}

fn run_estimator(
    method: Method,
    d: &Dataset,
    np: &NonparaConfig,
    fi: &FiConfig,
) -> Result<EstimateResult, CliError> {
    let res = match method {
        Method::Unadj => unadjusted(d)?,
        Method::Gpsw => gpsw(d)?,
        Method::Nonpara => {
            let mut tuning = TuningStore::default();
            nonpara_tau_with(d, np, &mut tuning)?
        }
        Method::Para => {
            let spec = ParamModelSpec::infer(d);
            let fit = fit_mle_fractional(d, &spec, fi)?;
            let mut res = EstimateResult {
                method: "para".into(),
                estimate: param_tau(&fit, d),
                se: None,
                ci: None,
                diagnostics: BTreeMap::new(),
            };
            res.diagnostics.insert("iterations".into(), fit.iterations as f64);
            res.diagnostics.insert("converged".into(), if fit.converged { 1.0 } else { 0.0 });
            res
        }
    };
    Ok(res)
}

/// Bootstrap SE and percentile interval; tuning (bandwidths, warm starts)
/// is frozen from the point fit so replicates only resample data.
fn bootstrap(
    method: Method,
    d: &Dataset,
    np: &NonparaConfig,
    fi: &FiConfig,
    n_boot: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, (f64, f64)), CliError> {
    let boot_seed = seed ^ 0x5eed;
    let boot = match method {
        Method::Unadj => {
            bootstrap_ci(|b| unadjusted(b).map(|r| r.estimate), d, n_boot, level, boot_seed)?
        }
        Method::Gpsw => {
            bootstrap_ci(|b| gpsw(b).map(|r| r.estimate), d, n_boot, level, boot_seed)?
        }
        Method::Nonpara => {
            let mut tuning = TuningStore::default();
            nonpara_tau_with(d, np, &mut tuning)?;
            tuning.freeze();
            bootstrap_ci(
                |b| {
                    let mut t = tuning.clone();
                    nonpara_tau_with(b, np, &mut t).map(|r| r.estimate)
                },
                d,
                n_boot,
                level,
                boot_seed,
            )?
        }
        Method::Para => {
            let spec = ParamModelSpec::infer(d);
            let fit = fit_mle_fractional(d, &spec, fi)?;
            // replicate fits start at the point estimate; the remaining
            // optimization error is far below the bootstrap spread
            let boot_fi = FiConfig {
                init: Some(fit.theta.clone()),
                tol: fi.tol.max(3e-4),
                ..fi.clone()
            };
            bootstrap_ci(
                |b| {
                    let spec = ParamModelSpec::infer(b);
                    let f = fit_mle_fractional(b, &spec, &boot_fi)?;
                    Ok(param_tau(&f, b))
                },
                d,
                n_boot,
                level,
                boot_seed,
            )?
        }
    };
    Ok((boot.se, boot.ci))
}

const IDENTIFY_KEYS: &[&str] = &["data", "tol", "format"];

fn cmd_identify(args: IdentifyArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.common.config.as_deref(), IDENTIFY_KEYS)?;
    let data = match args.data.or(file.string("data")?.map(PathBuf::from)) {
        Some(p) => p,
        None => return usage("--data is required"),
    };
    let tol = file.f64("tol")?.unwrap_or(args.tol);
    let d = load_data(&data)?;
    guard_discrete(&d)?;
    let joint = DiscreteJoint::from_dataset(&d)?;
    let report = check_identifiability(&joint, tol);

    let mut tau = None;
    let mut response = None;
    if report.identifiable {
        let xi = solve_xi(&joint, tol)?;
        let rec = recover_joint(&joint, &xi)?;
        tau = Some(discrete_tau(&rec)?);
        response = Some(
            rec.response
                .iter()
                .map(|(pat, probs)| (pat.to_string(), probs.clone()))
                .collect::<BTreeMap<String, Vec<f64>>>(),
        );
    }

    let resolved = json!({ "command": "identify", "data": data, "tol": tol });
    let payload = json!({
        "config": resolved,
        "identifiability": report,
        "tau": tau,
        "response": response,
    });
    let format = resolve_format(args.common.format, &file)?;
    let text = match format {
        Format::Json => pretty(&payload)?,
        Format::Table => {
            let mut s = format!(
                "identifiable {}\nranks        {:?} (q = {})\ncondition    {:?}\n",
                report.identifiable, report.ranks, report.q, report.condition_numbers
            );
            if let Some(reason) = &report.reason {
                let _ = writeln!(s, "reason       {reason}");
            }
            if let Some(t) = tau {
                let _ = writeln!(s, "tau          {:.6}\ntau_att      {:.6}", t.tau, t.tau_att);
            }
            s
        }
        Format::Csv => return usage("identify supports json or table output"),
    };
    emit(args.common.out.as_deref(), &text)
}

fn load_data(path: &Path) -> Result<Dataset, CliError> {
    match Dataset::load_csv(path) {
        Ok(d) => Ok(d),
        // an unreadable path is the caller's problem, like any other
        // config mistake
        Err(CoreError::Io(e)) => usage(format!("cannot read {}: {e}", path.display())),
        Err(e) => Err(e.into()),
    }
}

/// The exact identification path needs finite supports; anything that
/// looks continuous is sent to the estimation path instead.
fn guard_discrete(d: &Dataset) -> Result<(), CliError> {
    let distinct = |values: &mut Vec<f64>| {
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        values.dedup();
        values.len()
    };
    for j in 0..d.p() {
        let mut vals: Vec<f64> = (0..d.n()).filter_map(|i| d.x(i, j)).collect();
        if distinct(&mut vals) > 20 {
            return usage(format!(
                "column x{} has more than 20 distinct values; it looks continuous, use `mnar estimate --method nonpara`",
                j + 1
            ));
        }
    }
    let mut y: Vec<f64> = d.y().to_vec();
    if distinct(&mut y) > 20 {
        return usage(
            "outcome has more than 20 distinct values; it looks continuous, use `mnar estimate --method nonpara`",
        );
    }
    Ok(())
}

fn resolve_format(flag: Option<Format>, file: &FileConfig) -> Result<Format, CliError> {
    if let Some(f) = flag {
        return Ok(f);
    }
    match file.string("format")?.as_deref() {
        None => Ok(Format::Json),
        Some("json") => Ok(Format::Json),
        Some("table") => Ok(Format::Table),
        Some("csv") => Ok(Format::Csv),
        Some(other) => usage(format!("unknown format `{other}`")),
    }
}

fn pretty(v: &Value) -> Result<String, CliError> {
    serde_json::to_string_pretty(v).map_err(|e| RunError(e.to_string()).into())
}
