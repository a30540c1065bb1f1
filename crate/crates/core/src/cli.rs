//! Command-line front end.
//!
//! Every subcommand resolves its settings (flags over config file over
//! defaults) into an [`Invocation`], executes it, and writes a manifest
//! recording the invocation, the fully resolved values and the outputs.
//! `replay` re-executes a manifest.
//!
//! Exit codes: 0 success, 1 input or configuration error, 2 solver
//! non-convergence, 3 no Lepski selection, 4 failed check.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dataset::{load_csv, ColumnRef, Dataset};
use crate::error::{Error, Result};
use crate::experiments::{run_consistency, run_coverage, run_mom_mad_checks, EstimatorKind, ExperimentSpec, Scenario};
use crate::glasso::{graphical_lasso, sample_cov, GlassoConfig};
use crate::huber::{fit_huber, HuberConfig, WeightSpec};
use crate::inference::{confidence_region, efficiency_identity_check, one_step};
use crate::lepski::{fit_grid, LepskiConfig};
use crate::scale::MoMConfig;
use crate::score::ScoreFunction;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NONCONVERGED: i32 = 2;
pub const EXIT_NO_SELECTION: i32 = 3;
pub const EXIT_CHECK_FAILED: i32 = 4;

const CONFIG_SCHEMA: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "lepski-huber", version, about = "Robust sparse regression with an adaptively tuned Huber loss")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit one l1-penalized weighted Huber regression.
    Fit(FitArgs),
    /// Choose the Huber parameter by Lepski's method over a scale grid.
    Adapt(AdaptArgs),
    /// One-step score correction of a fitted coefficient vector.
    Debias(DebiasArgs),
    /// Confidence region for a set of coordinates.
    Ci(CiArgs),
    /// Run a simulation study and write its report.
    Simulate(SimulateArgs),
    /// Numerical and Monte Carlo self-checks.
    Check(CheckArgs),
    /// Re-execute the run recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config file (`"schema": 1`); flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to write the run manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// CSV file with covariate columns and a response column.
    data: PathBuf,
    /// Response column by header name (default: last column).
    #[arg(long, conflicts_with = "y_index")]
    y_column: Option<String>,
    /// Response column by 1-based position.
    #[arg(long)]
    y_index: Option<usize>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    /// Penalty level (default 0.005 b' sqrt(ln p / n)).
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    /// Weight constant in w(x) = min(1, b / ||x||).
    #[arg(long, allow_negative_numbers = true)]
    b: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    kkt_tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Sparsity level used in the comparison thresholds.
    #[arg(long)]
    k: Option<usize>,
    /// Comparison constant.
    #[arg(long = "C", allow_negative_numbers = true)]
    c: Option<f64>,
    /// Median-of-means failure probability.
    #[arg(long)]
    delta: Option<f64>,
    /// Grid depth: sigma_min = sigma_max / 2^M.
    #[arg(long = "M")]
    depth: Option<u32>,
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    b: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Select the largest grid index when no index passes.
    #[arg(long)]
    fallback: bool,
    #[arg(long)]
    out: PathBuf,
    /// Optional per-grid-point CSV.
    #[arg(long)]
    grid_csv: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct InferenceArgs {
    #[command(flatten)]
    data: DataArgs,
    /// JSON file with a "beta" array (output of `fit` or `adapt`).
    #[arg(long)]
    beta: PathBuf,
    /// gaussian or t3.
    #[arg(long)]
    score: Option<String>,
    /// Graphical Lasso penalty (default 0.5 sqrt(ln p / n)).
    #[arg(long, allow_negative_numbers = true)]
    glasso_lambda: Option<f64>,
    #[arg(long)]
    glasso_tol: Option<f64>,
    #[arg(long)]
    glasso_max_iter: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Optional dense CSV export of the precision estimate.
    #[arg(long)]
    theta_out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct DebiasArgs {
    #[command(flatten)]
    inference: InferenceArgs,
}

#[derive(Args, Debug)]
struct CiArgs {
    #[command(flatten)]
    inference: InferenceArgs,
    /// Comma-separated 1-based coordinates.
    #[arg(long = "J", value_delimiter = ',', allow_negative_numbers = true)]
    j: Option<Vec<i64>>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// fig1, fig2 or coverage.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long, value_delimiter = ',')]
    n_grid: Option<Vec<usize>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dimension for the coverage scenario.
    #[arg(long)]
    p: Option<usize>,
    /// Level for the coverage scenario.
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct CheckArgs {
    /// Also run this simulation scenario and check its properties.
    #[arg(long)]
    scenario: Option<String>,
    /// Trials for the scenario run.
    #[arg(long)]
    trials: Option<usize>,
    /// Trials for the median-of-means and MAD Monte Carlo.
    #[arg(long)]
    mc_trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    manifest: PathBuf,
    /// Write outputs (and the new manifest) here instead of the recorded
    /// locations.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

// ----- config file -----

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    schema: u32,
    #[serde(default)]
    data: DataSection,
    #[serde(default)]
    fit: FitSection,
    #[serde(default)]
    adapt: AdaptSection,
    #[serde(default)]
    inference: InferenceSection,
    #[serde(default)]
    simulate: SimulateSection,
    #[serde(default)]
    check: CheckSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataSection {
    y_column: Option<String>,
    y_index: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitSection {
    tau: Option<f64>,
    lambda: Option<f64>,
    b: Option<f64>,
    tol: Option<f64>,
    kkt_tol: Option<f64>,
    max_iter: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdaptSection {
    k: Option<usize>,
    #[serde(rename = "C")]
    c: Option<f64>,
    delta: Option<f64>,
    #[serde(rename = "M")]
    depth: Option<u32>,
    lambda: Option<f64>,
    b: Option<f64>,
    max_iter: Option<usize>,
    fallback: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct InferenceSection {
    score: Option<String>,
    glasso_lambda: Option<f64>,
    glasso_tol: Option<f64>,
    glasso_max_iter: Option<usize>,
    #[serde(rename = "J")]
    j: Option<Vec<i64>>,
    alpha: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateSection {
    scenario: Option<String>,
    n_grid: Option<Vec<usize>>,
    trials: Option<usize>,
    seed: Option<u64>,
    p: Option<usize>,
    alpha: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckSection {
    scenario: Option<String>,
    trials: Option<usize>,
    mc_trials: Option<usize>,
    seed: Option<u64>,
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile {
            schema: CONFIG_SCHEMA,
            ..Default::default()
        });
    };
    let text = read_text(path)?;
    let cfg: ConfigFile = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    if cfg.schema != CONFIG_SCHEMA {
        return Err(Error::config(format!(
            "{}: unsupported config schema {} (expected {CONFIG_SCHEMA})",
            path.display(),
            cfg.schema
        )));
    }
    Ok(cfg)
}

// ----- resolved invocations -----

/// Response column; `Index` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YColumn {
    Last,
    Name(String),
    Index(usize),
}

impl YColumn {
    fn resolve(name: Option<String>, index: Option<usize>, cfg: &DataSection) -> Result<Self> {
        let y = match (name, index) {
            (Some(n), _) => YColumn::Name(n),
            (None, Some(i)) => YColumn::Index(i),
            (None, None) => match (&cfg.y_column, cfg.y_index) {
                (Some(n), _) => YColumn::Name(n.clone()),
                (None, Some(i)) => YColumn::Index(i),
                (None, None) => YColumn::Last,
            },
        };
        if y == YColumn::Index(0) {
            return Err(Error::config("column indices are 1-based; --y-index 0 is invalid"));
        }
        Ok(y)
    }

    fn column_ref(&self) -> ColumnRef {
        match self {
            YColumn::Last => ColumnRef::Last,
            YColumn::Name(n) => ColumnRef::Name(n.clone()),
            YColumn::Index(i) => ColumnRef::Index(i - 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataInput {
    pub path: PathBuf,
    pub y: YColumn,
}

impl DataInput {
    fn load(&self) -> Result<Dataset> {
        load_csv(&self.path, &self.y.column_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitInvocation {
    pub data: DataInput,
    pub tau: f64,
    /// `None` means the default `0.005 b' sqrt(ln p / n)`.
    pub lambda: Option<f64>,
    pub b: f64,
    pub tol: f64,
    pub kkt_tol: f64,
    pub max_iter: usize,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptInvocation {
    pub data: DataInput,
    pub k: usize,
    #[serde(rename = "C")]
    pub c: f64,
    pub delta: f64,
    #[serde(rename = "M")]
    pub depth: Option<u32>,
    pub lambda: Option<f64>,
    pub b: f64,
    pub max_iter: usize,
    pub fallback: bool,
    pub out: PathBuf,
    pub grid_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceInvocation {
    pub data: DataInput,
    pub beta: PathBuf,
    pub score: String,
    pub glasso: GlassoConfig,
    /// 1-based coordinates; empty for `debias`.
    #[serde(rename = "J")]
    pub j: Vec<usize>,
    pub alpha: Option<f64>,
    pub out: PathBuf,
    pub theta_out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateInvocation {
    pub spec: ExperimentSpec,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckInvocation {
    pub scenario: Option<ExperimentSpec>,
    pub mc_trials: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Invocation {
    Fit(FitInvocation),
    Adapt(AdaptInvocation),
    Debias(InferenceInvocation),
    Ci(InferenceInvocation),
    Simulate(SimulateInvocation),
    Check(CheckInvocation),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: u32,
    pub tool: String,
    pub version: String,
    pub invocation: Invocation,
    /// Every value actually used, including data-dependent defaults.
    pub effective: Value,
    pub outputs: Vec<PathBuf>,
    pub exit_code: i32,
}

struct Outcome {
    code: i32,
    effective: Value,
    outputs: Vec<PathBuf>,
}

// ----- entry point -----

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NoSelection => EXIT_NO_SELECTION,
                _ => EXIT_INPUT,
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    let (inv, manifest) = match cmd {
        Command::Replay(args) => return replay(&args.manifest, args.out_dir.as_deref()),
        Command::Fit(a) => {
            let cfg = load_config(a.common.config.as_deref())?;
            (resolve_fit(a.data, a.tau, a.lambda, a.b, a.tol, a.kkt_tol, a.max_iter, a.out.clone(), &cfg)?, a.common.manifest)
        }
        Command::Adapt(a) => {
            let cfg = load_config(a.common.config.as_deref())?;
            let manifest = a.common.manifest.clone();
            (resolve_adapt(a, &cfg)?, manifest)
        }
        Command::Debias(a) => {
            let cfg = load_config(a.inference.common.config.as_deref())?;
            let manifest = a.inference.common.manifest.clone();
            (Invocation::Debias(resolve_inference(a.inference, None, None, &cfg)?), manifest)
        }
        Command::Ci(a) => {
            let cfg = load_config(a.inference.common.config.as_deref())?;
            let manifest = a.inference.common.manifest.clone();
            let j = a.j.or_else(|| cfg.inference.j.clone()).ok_or_else(|| Error::config("ci needs --J"))?;
            let alpha = a.alpha.or(cfg.inference.alpha).unwrap_or(0.1);
            (Invocation::Ci(resolve_inference(a.inference, Some(j), Some(alpha), &cfg)?), manifest)
        }
        Command::Simulate(a) => {
            let cfg = load_config(a.common.config.as_deref())?;
            let manifest = a.common.manifest.clone();
            (resolve_simulate(a, &cfg)?, manifest)
        }
        Command::Check(a) => {
            let cfg = load_config(a.common.config.as_deref())?;
            let manifest = a.common.manifest.clone();
            (resolve_check(a, &cfg)?, manifest)
        }
    };
    execute_and_record(inv, manifest)
}

fn execute_and_record(inv: Invocation, manifest_path: Option<PathBuf>) -> Result<i32> {
    let outcome = execute(&inv)?;
    let path = manifest_path.unwrap_or_else(|| default_manifest_path(&inv));
    let manifest = Manifest {
        schema: CONFIG_SCHEMA,
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        invocation: inv,
        effective: outcome.effective,
        outputs: outcome.outputs,
        exit_code: outcome.code,
    };
    write_json(&path, &manifest)?;
    Ok(outcome.code)
}

fn default_manifest_path(inv: &Invocation) -> PathBuf {
    let beside = |out: &Path| {
        let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
        out.with_file_name(format!("{stem}.manifest.json"))
    };
    match inv {
        Invocation::Fit(f) => beside(&f.out),
        Invocation::Adapt(a) => beside(&a.out),
        Invocation::Debias(d) | Invocation::Ci(d) => beside(&d.out),
        Invocation::Simulate(s) => s.out_dir.join(format!("{}_manifest.json", s.spec.file_stem())),
        Invocation::Check(c) => c.out_dir.join("check_manifest.json"),
    }
}

fn replay(path: &Path, out_dir: Option<&Path>) -> Result<i32> {
    let text = read_text(path)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("{}: not a run manifest: {e}", path.display())))?;
    if manifest.schema != CONFIG_SCHEMA {
        return Err(Error::config(format!("unsupported manifest schema {}", manifest.schema)));
    }
    let mut inv = manifest.invocation;
    let mut manifest_out = None;
    if let Some(dir) = out_dir {
        let move_file = |p: &mut PathBuf| {
            if let Some(name) = p.file_name() {
                *p = dir.join(name);
            }
        };
        match &mut inv {
            Invocation::Fit(f) => move_file(&mut f.out),
            Invocation::Adapt(a) => {
                move_file(&mut a.out);
                if let Some(g) = a.grid_csv.as_mut() {
                    move_file(g);
                }
            }
            Invocation::Debias(d) | Invocation::Ci(d) => {
                move_file(&mut d.out);
                if let Some(t) = d.theta_out.as_mut() {
                    move_file(t);
                }
            }
            Invocation::Simulate(s) => s.out_dir = dir.to_path_buf(),
            Invocation::Check(c) => c.out_dir = dir.to_path_buf(),
        }
        manifest_out = Some(dir.join(path.file_name().unwrap_or_else(|| "manifest.json".as_ref())));
    }
    execute_and_record(inv, manifest_out)
}

// ----- resolution -----

#[allow(clippy::too_many_arguments)]
fn resolve_fit(
    data: DataArgs,
    tau: Option<f64>,
    lambda: Option<f64>,
    b: Option<f64>,
    tol: Option<f64>,
    kkt_tol: Option<f64>,
    max_iter: Option<usize>,
    out: PathBuf,
    cfg: &ConfigFile,
) -> Result<Invocation> {
    let defaults = HuberConfig::new(1.0, 0.0);
    let s = &cfg.fit;
    Ok(Invocation::Fit(FitInvocation {
        data: DataInput {
            y: YColumn::resolve(data.y_column, data.y_index, &cfg.data)?,
            path: data.data,
        },
        tau: tau.or(s.tau).unwrap_or(1.0),
        lambda: lambda.or(s.lambda),
        b: b.or(s.b).unwrap_or(1.0),
        tol: tol.or(s.tol).unwrap_or(defaults.tol),
        kkt_tol: kkt_tol.or(s.kkt_tol).unwrap_or(defaults.kkt_tol),
        max_iter: max_iter.or(s.max_iter).unwrap_or(defaults.max_iter),
        out,
    }))
}

fn resolve_adapt(a: AdaptArgs, cfg: &ConfigFile) -> Result<Invocation> {
    let s = &cfg.adapt;
    let k = a.k.or(s.k).ok_or_else(|| Error::config("adapt needs the sparsity level --k"))?;
    Ok(Invocation::Adapt(AdaptInvocation {
        data: DataInput {
            y: YColumn::resolve(a.data.y_column, a.data.y_index, &cfg.data)?,
            path: a.data.data,
        },
        k,
        c: a.c.or(s.c).unwrap_or(20.0),
        delta: a.delta.or(s.delta).unwrap_or(MoMConfig::default().delta),
        depth: a.depth.or(s.depth),
        lambda: a.lambda.or(s.lambda),
        b: a.b.or(s.b).unwrap_or(1.0),
        max_iter: a.max_iter.or(s.max_iter).unwrap_or(HuberConfig::new(1.0, 0.0).max_iter),
        fallback: a.fallback || s.fallback.unwrap_or(false),
        out: a.out,
        grid_csv: a.grid_csv,
    }))
}

fn resolve_inference(a: InferenceArgs, j: Option<Vec<i64>>, alpha: Option<f64>, cfg: &ConfigFile) -> Result<InferenceInvocation> {
    let s = &cfg.inference;
    let defaults = GlassoConfig::default();
    let j = match j {
        None => Vec::new(),
        Some(list) => {
            if list.is_empty() {
                return Err(Error::config("--J needs at least one coordinate"));
            }
            list.into_iter()
                .map(|v| {
                    if v < 1 {
                        Err(Error::config(format!(
                            "coordinate indices are 1-based; got {v} in --J"
                        )))
                    } else {
                        Ok(v as usize)
                    }
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(InferenceInvocation {
        data: DataInput {
            y: YColumn::resolve(a.data.y_column, a.data.y_index, &cfg.data)?,
            path: a.data.data,
        },
        beta: a.beta,
        score: a.score.or_else(|| s.score.clone()).unwrap_or_else(|| "t3".into()),
        glasso: GlassoConfig {
            lambda: a.glasso_lambda.or(s.glasso_lambda),
            tol: a.glasso_tol.or(s.glasso_tol).unwrap_or(defaults.tol),
            max_iter: a.glasso_max_iter.or(s.glasso_max_iter).unwrap_or(defaults.max_iter),
        },
        j,
        alpha,
        out: a.out,
        theta_out: a.theta_out,
    })
}

fn scenario_spec(name: &str, p: Option<usize>, alpha: Option<f64>, seed: u64) -> Result<ExperimentSpec> {
    match name {
        "fig1" => Ok(ExperimentSpec::fig1(seed)),
        "fig2" => Ok(ExperimentSpec::fig2(seed)),
        "coverage" => Ok(ExperimentSpec::coverage(p.unwrap_or(10), 100, alpha.unwrap_or(0.1), 200, seed)),
        other => Err(Error::config(format!(
            "unknown scenario {other:?}; expected fig1, fig2 or coverage"
        ))),
    }
}

fn resolve_simulate(a: SimulateArgs, cfg: &ConfigFile) -> Result<Invocation> {
    let s = &cfg.simulate;
    let name = a.scenario.or_else(|| s.scenario.clone()).ok_or_else(|| Error::config("simulate needs --scenario"))?;
    let p = a.p.or(s.p);
    let alpha = a.alpha.or(s.alpha);
    let mut spec = scenario_spec(&name, p, alpha, a.seed.or(s.seed).unwrap_or(1))?;
    if name != "coverage" && (p.is_some() || alpha.is_some()) {
        return Err(Error::config("--p and --alpha apply to the coverage scenario only"));
    }
    if let Some(grid) = a.n_grid.or_else(|| s.n_grid.clone()) {
        spec.n_grid = grid;
    }
    if let Some(t) = a.trials.or(s.trials) {
        spec.trials = t;
    }
    spec.validate()?;
    Ok(Invocation::Simulate(SimulateInvocation {
        spec,
        out_dir: a.out_dir.unwrap_or_else(|| PathBuf::from(".")),
    }))
}

fn resolve_check(a: CheckArgs, cfg: &ConfigFile) -> Result<Invocation> {
    let s = &cfg.check;
    let seed = a.seed.or(s.seed).unwrap_or(1);
    let scenario = match a.scenario.or_else(|| s.scenario.clone()) {
        None => None,
        Some(name) => {
            let mut spec = scenario_spec(&name, None, None, seed)?;
            if let Some(t) = a.trials.or(s.trials) {
                spec.trials = t;
            }
            spec.validate()?;
            Some(spec)
        }
    };
    Ok(Invocation::Check(CheckInvocation {
        scenario,
        mc_trials: a.mc_trials.or(s.mc_trials).unwrap_or(1000),
        seed,
        out_dir: a.out_dir.unwrap_or_else(|| PathBuf::from(".")),
    }))
}

// ----- execution -----

fn execute(inv: &Invocation) -> Result<Outcome> {
    match inv {
        Invocation::Fit(f) => exec_fit(f),
        Invocation::Adapt(a) => exec_adapt(a),
        Invocation::Debias(d) => exec_inference(d, false),
        Invocation::Ci(c) => exec_inference(c, true),
        Invocation::Simulate(s) => exec_simulate(s),
        Invocation::Check(c) => exec_check(c),
    }
}

fn exec_fit(f: &FitInvocation) -> Result<Outcome> {
    let data = f.data.load()?;
    let weights = WeightSpec::identity(f.b);
    weights.validate()?;
    let lambda = f
        .lambda
        .unwrap_or_else(|| HuberConfig::default_lambda(weights.b_prime(), data.n(), data.p()));
    let cfg = HuberConfig {
        weights,
        tol: f.tol,
        kkt_tol: f.kkt_tol,
        max_iter: f.max_iter,
        ..HuberConfig::new(f.tau, lambda)
    };
    cfg.validate()?;
    let est = fit_huber(&data, &cfg, None)?;
    write_json(&f.out, &est)?;
    let code = if est.converged {
        EXIT_OK
    } else {
        eprintln!(
            "warning: solver stopped after {} iterations with KKT residual {:e}",
            est.iterations, est.kkt_residual
        );
        EXIT_NONCONVERGED
    };
    Ok(Outcome {
        code,
        effective: json!({ "n": data.n(), "p": data.p(), "huber": cfg }),
        outputs: vec![f.out.clone()],
    })
}

fn exec_adapt(a: &AdaptInvocation) -> Result<Outcome> {
    let data = a.data.load()?;
    let mut lep = LepskiConfig::for_problem(a.k, data.n(), data.p());
    lep.c = a.c;
    lep.depth = a.depth;
    lep.fallback = a.fallback;
    lep.template.weights = WeightSpec::identity(a.b);
    lep.template.weights.validate()?;
    lep.template.lambda = a
        .lambda
        .unwrap_or_else(|| HuberConfig::default_lambda(lep.template.weights.b_prime(), data.n(), data.p()));
    lep.template.max_iter = a.max_iter;
    lep.template.validate()?;
    let mom = MoMConfig::new(a.delta);
    mom.validate()?;
    let result = fit_grid(&data, &lep, &mom)?;
    write_json(&a.out, &result)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(path) = &a.grid_csv {
        let mut buf = Vec::new();
        result
            .write_grid_csv(&mut buf)
            .map_err(|source| Error::Io { path: path.clone(), source })?;
        write_bytes(path, &buf)?;
        outputs.push(path.clone());
    }
    let code = match result.j_star {
        None => {
            eprintln!("error: no grid index passed Lepski's comparisons (rerun with --fallback to take the largest index)");
            EXIT_NO_SELECTION
        }
        Some(j) => {
            if result.fallback_used {
                eprintln!("warning: no grid index passed Lepski's comparisons; fell back to the largest index {j}");
            }
            println!("j_star = {j}");
            EXIT_OK
        }
    };
    Ok(Outcome {
        code,
        effective: json!({
            "n": data.n(),
            "p": data.p(),
            "lepski": lep,
            "mom": { "delta": mom.delta, "K": mom.group_count(data.n()) },
            "grid_depth": result.grid.as_ref().map(|g| g.depth),
        }),
        outputs,
    })
}

fn read_beta(path: &Path, p: usize) -> Result<DVector<f64>> {
    let text = read_text(path)?;
    let v: Value = serde_json::from_str(&text)?;
    let arr = v
        .get("beta")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::config(format!("{}: no \"beta\" array", path.display())))?;
    let beta: Vec<f64> = arr
        .iter()
        .map(|x| x.as_f64())
        .collect::<Option<_>>()
        .ok_or_else(|| Error::config(format!("{}: \"beta\" must contain numbers", path.display())))?;
    if beta.len() != p {
        return Err(Error::dim(format!(
            "{}: beta has length {} but the data have {p} covariates",
            path.display(),
            beta.len()
        )));
    }
    Ok(DVector::from_vec(beta))
}

fn exec_inference(inv: &InferenceInvocation, region: bool) -> Result<Outcome> {
    let score = ScoreFunction::by_name(&inv.score)?;
    if let Some(alpha) = inv.alpha {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::config(format!("alpha must lie in (0, 1), got {alpha}")));
        }
    }
    let data = inv.data.load()?;
    if let Some(&bad) = inv.j.iter().find(|&&j| j > data.p()) {
        return Err(Error::config(format!(
            "coordinate {bad} in --J exceeds p = {} (indices are 1-based)",
            data.p()
        )));
    }
    let beta = read_beta(&inv.beta, data.p())?;
    let lambda = inv.glasso.resolve_lambda(data.n(), data.p());
    let theta = graphical_lasso(&sample_cov(&data), lambda, inv.glasso.tol, inv.glasso.max_iter)?;
    let glasso_info = json!({
        "lambda_theta": theta.lambda_theta,
        "kkt_residual": theta.kkt_residual,
        "iterations": theta.iterations,
        "converged": theta.converged,
    });
    let effective = json!({
        "n": data.n(),
        "p": data.p(),
        "score": inv.score,
        "glasso": { "lambda": lambda, "tol": inv.glasso.tol, "max_iter": inv.glasso.max_iter },
        "J": inv.j,
        "alpha": inv.alpha,
    });
    if !theta.converged {
        eprintln!(
            "error: graphical lasso did not converge in {} sweeps (KKT residual {:e})",
            theta.iterations, theta.kkt_residual
        );
        return Ok(Outcome {
            code: EXIT_NONCONVERGED,
            effective,
            outputs: Vec::new(),
        });
    }
    let mut outputs = Vec::new();
    if let Some(path) = &inv.theta_out {
        theta.write_csv(path)?;
        outputs.push(path.clone());
    }
    let est = one_step(&data, &beta, &theta, &score)?;
    if region {
        let j: Vec<usize> = inv.j.iter().map(|j| j - 1).collect();
        let alpha = inv.alpha.unwrap_or(0.1);
        let reg = confidence_region(&data, &est, &theta, &score, &j, alpha)?;
        write_json(&inv.out, &reg)?;
        for (k, &(lo, hi)) in reg.intervals.iter().enumerate() {
            println!("beta_{}: [{lo}, {hi}]", reg.j[k] + 1);
        }
    } else {
        write_json(
            &inv.out,
            &json!({
                "score": inv.score,
                "b_psi": est.b_psi,
                "base_beta": est.base_beta,
                "diagnostics": est.diagnostics,
                "glasso": glasso_info,
            }),
        )?;
    }
    outputs.insert(0, inv.out.clone());
    Ok(Outcome {
        code: EXIT_OK,
        effective,
        outputs,
    })
}

fn exec_simulate(s: &SimulateInvocation) -> Result<Outcome> {
    let report = match s.spec.scenario {
        Scenario::Coverage { .. } => run_coverage(&s.spec)?,
        _ => run_consistency(&s.spec)?,
    };
    let (csv, json_path) = report.write(&s.out_dir, &s.spec.file_stem())?;
    for row in &report.summary {
        let cover = row
            .pooled_coverage
            .map(|c| format!(" coverage={c:.3}"))
            .unwrap_or_default();
        println!(
            "n={} {}{} mean_l2={:.6e} failures={}{cover}",
            row.n,
            match row.estimator {
                EstimatorKind::Lepski => "lepski",
                EstimatorKind::OneStep => "one_step",
            },
            row.score.as_deref().map(|s| format!("[{s}]")).unwrap_or_default(),
            row.mean_l2_error,
            row.failures
        );
    }
    Ok(Outcome {
        code: EXIT_OK,
        effective: json!({ "spec": s.spec }),
        outputs: vec![csv, json_path],
    })
}

#[derive(Debug, Serialize)]
struct CheckLine {
    name: String,
    pass: bool,
    detail: String,
}

fn exec_check(c: &CheckInvocation) -> Result<Outcome> {
    let mut lines = Vec::new();
    let mut push = |name: &str, pass: bool, detail: String| {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        lines.push(CheckLine {
            name: name.into(),
            pass,
            detail,
        });
    };

    match efficiency_identity_check(3, 1e-10) {
        Ok((v1, v2)) => push(
            "efficiency_t3",
            (v1 - 1.5).abs() <= 1e-6 && (v1 - v2).abs() / v1 <= 1e-6,
            format!("v1 = {v1:.9} v2 = {v2:.9}"),
        ),
        Err(e) => push("efficiency_t3", false, e.to_string()),
    }
    let mc = run_mom_mad_checks(c.mc_trials, c.seed)?;
    push(
        "mom_deviation_bound",
        mc.mom_failure_rate <= mc.delta + 0.02,
        format!("failure rate {:.4} (delta {})", mc.mom_failure_rate, mc.delta),
    );
    push(
        "mad_dominance",
        mc.mad_dominance && mc.mad_zero_exact,
        format!("mean MAD(X+Y) - MAD(X) = {:.4} (se {:.4})", mc.mad_gap_mean, mc.mad_gap_se),
    );

    if let Some(spec) = &c.scenario {
        match spec.scenario {
            Scenario::Coverage { alpha, .. } => {
                let report = run_coverage(spec)?;
                let n = spec.n_grid[0];
                let t3 = report
                    .summary_for(n, EstimatorKind::OneStep, Some("t3"))
                    .and_then(|s| s.pooled_coverage)
                    .unwrap_or(f64::NAN);
                let target = 1.0 - alpha;
                push(
                    "coverage_t3",
                    (t3 - target).abs() <= 0.05,
                    format!("coverage {t3:.3} at nominal {target:.3}"),
                );
            }
            _ => {
                let report = run_consistency(spec)?;
                let curve = report.mean_l2_curve(EstimatorKind::Lepski);
                let decreasing = curve.windows(2).all(|w| w[1].1 < w[0].1);
                let failures: usize = report.summary.iter().map(|s| s.failures).sum();
                push(
                    "error_decreases_with_n",
                    decreasing && failures == 0,
                    format!("mean l2 errors {:?}, failed rows {failures}", curve.iter().map(|c| c.1).collect::<Vec<_>>()),
                );
            }
        }
    }

    let all = lines.iter().all(|l| l.pass);
    let path = c.out_dir.join("check_report.json");
    fs::create_dir_all(&c.out_dir).map_err(|source| Error::Io {
        path: c.out_dir.clone(),
        source,
    })?;
    write_json(&path, &json!({ "passed": all, "checks": lines }))?;
    if !all {
        let failed: Vec<&str> = lines.iter().filter(|l| !l.pass).map(|l| l.name.as_str()).collect();
        eprintln!("checks failed: {}", failed.join(", "));
    }
    Ok(Outcome {
        code: if all { EXIT_OK } else { EXIT_CHECK_FAILED },
        effective: json!({ "mc_trials": c.mc_trials, "seed": c.seed, "scenario": c.scenario }),
        outputs: vec![path],
    })
}

// ----- io helpers -----

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(bytes).map_err(io_err)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}
