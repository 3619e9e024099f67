//! Command-line driver for `incentive-core`.
//!
//! Subcommands: `solve`, `entropy`, `optimize`, `infer`, `gradcheck`. Every
//! command is deterministic given its config, flags and seed. Written outputs
//! get a `manifest.toml` next to them.
//!
//! Exit codes: 0 success, 1 usage error, 2 config error, 3 numerical failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use incentive_core::gridworld::{build_problem, bundled_config, load_config, Action, Cell, GridConfig};
use incentive_core::hmm::{sample_observations, sample_observations_for_type};
use incentive_core::incentive::{
    objective, optimize_with, total_gradient, IncentiveProblem, ObjectiveConfig, OptStatus, ResamplePolicy,
};
use incentive_core::inference::{
    exact_conditional_entropy, posterior_estimator, sampled_conditional_entropy, sampled_entropy_terms, EntropyMode,
};
use incentive_core::mdp::{solve_with_payment, SidePayment, SoftSolution};
use incentive_core::q_gradient::profile_q_jacobian;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<incentive_core::Error> for CliError {
    fn from(e: incentive_core::Error) -> Self {
        use incentive_core::Error as E;
        match e {
            E::Config(m) => CliError::Config(m),
            E::InvalidArgument(m) => CliError::Usage(m),
            e @ E::EnumerationCap { .. } => CliError::Usage(e.to_string()),
            e => CliError::Numerical(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "incentive", version, about = "Side payments for active type inference on grid worlds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print V*, Q* and the softmax policy of one type.
    Solve(SolveArgs),
    /// Estimate H(T | Y) under a payment.
    Entropy(EntropyArgs),
    /// Projected gradient descent on the payment; writes trace.csv and payment.toml.
    Optimize(OptimizeArgs),
    /// Posterior estimator for sequences generated by one type.
    Infer(InferArgs),
    /// Compare the analytic dJ/dx with finite differences of the exact objective.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Config file path or bundled name (fire_rescue, behavior_comparison, tiny).
    #[arg(long)]
    pub config: String,
}

#[derive(Debug, Args)]
pub struct PaymentArgs {
    /// Payment values: one value for every support pair, or a comma list.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with = "payment")]
    pub x: Option<Vec<f64>>,
    /// Payment file as written by `optimize`.
    #[arg(long)]
    pub payment: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SamplingArgs {
    /// Observation steps; sequences hold horizon + 1 symbols.
    #[arg(long, default_value_t = 12)]
    pub horizon: usize,
    /// Monte Carlo sample count.
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "sampled", value_parser = parse_mode)]
    pub mode: EntropyMode,
    /// Largest sequence count exact mode will enumerate.
    #[arg(long, default_value_t = incentive_core::inference::DEFAULT_ENUMERATION_CAP)]
    pub enumeration_cap: u64,
}

fn parse_mode(s: &str) -> std::result::Result<EntropyMode, String> {
    s.parse().map_err(|e: incentive_core::Error| e.to_string())
}

fn parse_resample(s: &str) -> std::result::Result<ResamplePolicy, String> {
    s.parse().map_err(|e: incentive_core::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Follower type, 1-based.
    #[arg(long = "type")]
    pub type_id: usize,
    #[command(flatten)]
    pub payment: PaymentArgs,
    /// Also write the table and a manifest into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EntropyArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub payment: PaymentArgs,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Cost weight on ||x||_1.
    #[arg(long, default_value_t = 0.05)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub step: f64,
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
    /// Stop once the projected-gradient norm falls below this.
    #[arg(long, default_value_t = 1e-4)]
    pub grad_tol: f64,
    /// Initial payment: one value for every support pair, or a comma list.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "1")]
    pub x0: Vec<f64>,
    #[arg(long, default_value = "fresh", value_parser = parse_resample)]
    pub resample: ResamplePolicy,
    /// Output directory for trace.csv, payment.toml and manifest.toml.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub payment: PaymentArgs,
    /// Type generating the sequences, 1-based.
    #[arg(long)]
    pub true_type: usize,
    #[arg(long, default_value_t = 12)]
    pub horizon: usize,
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub payment: PaymentArgs,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long, default_value_t = 0.05)]
    pub beta: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5, allow_hyphen_values = true)]
    pub eps: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A loaded config and where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub grid: GridConfig,
    /// Bundled name, or the canonical file path.
    pub source: String,
}

/// Reads `spec` as a file if one exists there, else as a bundled name.
pub fn load(spec: &str) -> Result<LoadedConfig> {
    let path = Path::new(spec);
    let (text, source) = if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{spec}: {e}")))?;
        let source = path
            .canonicalize()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|_| spec.to_string());
        (text, source)
    } else if let Some(text) = bundled_config(spec) {
        (text.to_string(), spec.to_string())
    } else {
        return Err(CliError::Config(format!(
            "`{spec}` is neither a file nor a bundled config"
        )));
    };
    Ok(LoadedConfig {
        grid: load_config(&text)?,
        source,
    })
}

/// Final or initial payment in a form independent of state numbering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaymentFile {
    pub max_value: f64,
    #[serde(rename = "entry")]
    pub entries: Vec<PaymentEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaymentEntry {
    /// `[col, row]`
    pub cell: [usize; 2],
    pub action: String,
    pub value: f64,
}

impl PaymentFile {
    pub fn from_payment(grid: &GridConfig, x: &SidePayment) -> Self {
        let entries = x
            .support()
            .iter()
            .zip(x.values())
            .map(|(&(s, a), &value)| {
                let cell = grid.cell(s);
                PaymentEntry {
                    cell: [cell.col, cell.row],
                    action: Action::ALL[a].symbol().to_string(),
                    value,
                }
            })
            .collect();
        Self {
            max_value: x.max_value(),
            entries,
        }
    }

    /// Values in the problem's support order.
    pub fn values_for(&self, grid: &GridConfig, problem: &IncentiveProblem) -> Result<Vec<f64>> {
        let mut values = vec![0.0; problem.support().len()];
        let mut seen = vec![false; values.len()];
        for (k, e) in self.entries.iter().enumerate() {
            let action = Action::parse(&e.action)
                .ok_or_else(|| CliError::Config(format!("entry[{k}]: unknown action `{}`", e.action)))?;
            let [col, row] = e.cell;
            if col >= grid.width || row >= grid.height {
                return Err(CliError::Config(format!("entry[{k}]: cell ({col},{row}) outside the grid")));
            }
            let pair = (grid.state(Cell::new(col, row)), action.index());
            let j = problem.support().iter().position(|p| *p == pair).ok_or_else(|| {
                CliError::Config(format!("entry[{k}]: ({col},{row}) {} is not in the payment support", e.action))
            })?;
            values[j] = e.value;
            seen[j] = true;
        }
        if let Some(j) = seen.iter().position(|s| !s) {
            let (s, a) = problem.support()[j];
            return Err(CliError::Config(format!(
                "payment file has no entry for {} {}",
                grid.cell(s),
                Action::ALL[a].symbol()
            )));
        }
        Ok(values)
    }
}

/// Everything needed to rerun a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub argv: Vec<String>,
    pub hyperparameters: BTreeMap<String, toml::Value>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, config: &LoadedConfig, seed: Option<u64>, argv: &[String]) -> Self {
        Self {
            tool_version: TOOL_VERSION.to_string(),
            command: command.to_string(),
            config: config.source.clone(),
            seed,
            argv: argv.to_vec(),
            hyperparameters: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    fn set(&mut self, key: &str, value: impl Into<toml::Value>) -> &mut Self {
        self.hyperparameters.insert(key.to_string(), value.into());
        self
    }

    fn set_floats(&mut self, key: &str, values: &[f64]) -> &mut Self {
        let arr = values.iter().map(|v| toml::Value::Float(*v)).collect();
        self.hyperparameters.insert(key.to_string(), toml::Value::Array(arr));
        self
    }

    fn set_sampling(&mut self, s: &SamplingArgs) -> &mut Self {
        self.set("horizon", s.horizon as i64)
            .set("samples", s.samples as i64)
            .set("mode", s.mode.to_string())
            .set("enumeration_cap", s.enumeration_cap as i64)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| CliError::Io(e.to_string()))?;
        write_file(&dir.join("manifest.toml"), &text)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Fixed scientific format with 17 significant digits.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

fn resolve_payment(args: &PaymentArgs, loaded: &LoadedConfig, problem: &IncentiveProblem) -> Result<SidePayment> {
    let values = match (&args.x, &args.payment) {
        (_, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            let file: PaymentFile =
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            file.values_for(&loaded.grid, problem)?
        }
        (Some(x), None) => x.clone(),
        (None, None) => vec![0.0],
    };
    payment_from_values(problem, &values)
}

fn payment_from_values(problem: &IncentiveProblem, values: &[f64]) -> Result<SidePayment> {
    let n = problem.support().len();
    let values = match values.len() {
        1 => vec![values[0]; n],
        k if k == n => values.to_vec(),
        k => {
            return Err(CliError::Usage(format!(
                "payment has {k} values but the support has {n} pairs"
            )))
        }
    };
    Ok(problem.payment(values)?)
}

fn type_index(grid: &GridConfig, one_based: usize) -> Result<usize> {
    grid.type_index(one_based).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown type {one_based}: config has types 1..={}",
            grid.types.len()
        ))
    })
}

/// `state,col,row,V,Q_N..Q_W,pi_N..pi_W` rows in fixed format.
pub fn format_solution(grid: &GridConfig, sol: &SoftSolution) -> String {
    let mut out = String::from("state,col,row,V");
    for prefix in ["Q", "pi"] {
        for a in Action::ALL {
            out.push_str(&format!(",{prefix}_{}", a.symbol()));
        }
    }
    out.push('\n');
    for s in 0..sol.v_star.len() {
        let cell = grid.cell(s);
        out.push_str(&format!("{s},{},{},{}", cell.col, cell.row, fmt_num(sol.v_star[s])));
        for a in 0..Action::ALL.len() {
            out.push_str(&format!(",{}", fmt_num(sol.q_star[(s, a)])));
        }
        for a in 0..Action::ALL.len() {
            out.push_str(&format!(",{}", fmt_num(sol.policy[(s, a)])));
        }
        out.push('\n');
    }
    out
}

fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| CliError::Io(e.to_string()))
}

fn emit(stdout: &mut dyn Write, text: &str) -> Result<()> {
    stdout
        .write_all(text.as_bytes())
        .map_err(|e| CliError::Io(format!("stdout: {e}")))
}

/// Writes `text` to `dir/name` plus a manifest, when an output dir was given.
fn save(dir: Option<&Path>, name: &str, text: &str, mut manifest: RunManifest) -> Result<()> {
    if let Some(dir) = dir {
        ensure_dir(dir)?;
        write_file(&dir.join(name), text)?;
        manifest.outputs.push(name.to_string());
        manifest.write(dir)?;
    }
    Ok(())
}

fn objective_config(s: &SamplingArgs, beta: f64) -> ObjectiveConfig {
    ObjectiveConfig {
        horizon: s.horizon,
        sample_count: s.samples,
        beta,
        seed: s.seed,
        entropy_mode: s.mode,
        enumeration_cap: s.enumeration_cap,
        ..ObjectiveConfig::default()
    }
}

fn cmd_solve(a: &SolveArgs, argv: &[String], stdout: &mut dyn Write) -> Result<()> {
    let loaded = load(&a.config.config)?;
    let problem = build_problem(&loaded.grid)?;
    let t = type_index(&loaded.grid, a.type_id)?;
    let x = resolve_payment(&a.payment, &loaded, &problem)?;
    let sol = solve_with_payment(&problem.followers()[t], &x, problem.solver())?;
    let table = format_solution(&loaded.grid, &sol);
    emit(stdout, &table)?;
    let mut manifest = RunManifest::new("solve", &loaded, None, argv);
    manifest.set("type", a.type_id as i64).set_floats("x", x.values());
    save(a.out.as_deref(), "solution.csv", &table, manifest)
}

#[derive(Debug, Serialize)]
struct EntropyReport {
    mode: String,
    horizon: usize,
    entropy_bits: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    std_error: Option<f64>,
    x: Vec<f64>,
}

fn cmd_entropy(a: &EntropyArgs, argv: &[String], stdout: &mut dyn Write) -> Result<()> {
    let loaded = load(&a.config.config)?;
    let problem = build_problem(&loaded.grid)?;
    let x = resolve_payment(&a.payment, &loaded, &problem)?;
    if a.sampling.samples == 0 {
        return Err(CliError::Usage("--samples must be at least 1".into()));
    }
    let aug = problem.respond(&x)?.aug;
    let s = &a.sampling;
    let est = match s.mode {
        EntropyMode::Exact => exact_conditional_entropy(&aug, s.horizon, s.enumeration_cap)?,
        EntropyMode::Sampled => {
            let samples: Vec<_> = sample_observations(&aug, s.samples, s.horizon, s.seed)?
                .into_iter()
                .map(|(_, y)| y)
                .collect();
            sampled_conditional_entropy(&aug, &samples)?
        }
    };
    let report = to_toml(&EntropyReport {
        mode: est.mode.to_string(),
        horizon: s.horizon,
        entropy_bits: est.value,
        samples: est.sample_count,
        std_error: est.std_error,
        x: x.values().to_vec(),
    })?;
    emit(stdout, &report)?;
    let mut manifest = RunManifest::new("entropy", &loaded, Some(s.seed), argv);
    manifest.set_sampling(s).set_floats("x", x.values());
    save(a.out.as_deref(), "entropy.toml", &report, manifest)
}

/// Header of the optimization trace.
pub fn trace_header(support_len: usize) -> Vec<String> {
    let mut h = vec!["iter".to_string()];
    h.extend((0..support_len).map(|j| format!("x{j}")));
    h.extend(["H", "h", "J", "gnorm"].map(String::from));
    h
}

#[derive(Debug, Serialize)]
struct OptimizeSummary {
    status: String,
    iterations: usize,
    entropy_bits: f64,
    cost: f64,
    objective: f64,
    x: Vec<f64>,
}

fn cmd_optimize(a: &OptimizeArgs, argv: &[String], stdout: &mut dyn Write) -> Result<()> {
    let loaded = load(&a.config.config)?;
    let problem = build_problem(&loaded.grid)?;
    let x0 = payment_from_values(&problem, &a.x0)?;
    let config = ObjectiveConfig {
        step_size: a.step,
        max_iters: a.max_iters,
        grad_tol: a.grad_tol,
        resample: a.resample,
        ..objective_config(&a.sampling, a.beta)
    };
    config.validate()?;
    ensure_dir(&a.out)?;
    let trace_path = a.out.join("trace.csv");
    let mut writer = csv::Writer::from_path(&trace_path).map_err(|e| io_err(&trace_path, e))?;
    writer
        .write_record(trace_header(x0.len()))
        .map_err(|e| io_err(&trace_path, e))?;
    let mut write_err = None;
    let trace = optimize_with(&problem, &config, &x0, |r| {
        let mut row = vec![r.iter.to_string()];
        row.extend(r.x.iter().map(|v| fmt_num(*v)));
        row.extend([r.entropy, r.cost, r.objective, r.grad_norm].map(fmt_num));
        if let Err(e) = writer.write_record(&row).and_then(|_| writer.flush().map_err(Into::into)) {
            write_err.get_or_insert(e);
        }
    })?;
    drop(writer);
    if let Some(e) = write_err {
        return Err(io_err(&trace_path, e));
    }

    let mut manifest = RunManifest::new("optimize", &loaded, Some(a.sampling.seed), argv);
    manifest
        .set_sampling(&a.sampling)
        .set("beta", a.beta)
        .set("step", a.step)
        .set("max_iters", a.max_iters as i64)
        .set("grad_tol", a.grad_tol)
        .set("resample", a.resample.to_string())
        .set_floats("x0", x0.values());
    manifest.outputs.push("trace.csv".into());

    let last = trace.last().cloned();
    if let Some(r) = &last {
        let payment = problem.payment(r.x.clone())?;
        let file = to_toml(&PaymentFile::from_payment(&loaded.grid, &payment))?;
        write_file(&a.out.join("payment.toml"), &file)?;
        manifest.outputs.push("payment.toml".into());
    }
    manifest.write(&a.out)?;

    let status = match &trace.status {
        OptStatus::Converged => "converged",
        OptStatus::MaxIters => "max-iters",
        OptStatus::Aborted(_) => "aborted",
    };
    if let Some(r) = &last {
        emit(
            stdout,
            &to_toml(&OptimizeSummary {
                status: status.into(),
                iterations: r.iter,
                entropy_bits: r.entropy,
                cost: r.cost,
                objective: r.objective,
                x: r.x.clone(),
            })?,
        )?;
    }
    match trace.status {
        OptStatus::Aborted(e) => Err(e.into()),
        _ => Ok(()),
    }
}

#[derive(Debug, Serialize)]
struct InferReport {
    true_type: usize,
    samples: usize,
    horizon: usize,
    /// Averaged posterior per type, type 1 first.
    estimates: Vec<f64>,
    x: Vec<f64>,
}

fn cmd_infer(a: &InferArgs, argv: &[String], stdout: &mut dyn Write) -> Result<()> {
    let loaded = load(&a.config.config)?;
    let problem = build_problem(&loaded.grid)?;
    let t = type_index(&loaded.grid, a.true_type)?;
    let x = resolve_payment(&a.payment, &loaded, &problem)?;
    if a.samples == 0 {
        return Err(CliError::Usage("--samples must be at least 1".into()));
    }
    let aug = problem.respond(&x)?.aug;
    let samples = sample_observations_for_type(&aug, t, a.samples, a.horizon, a.seed)?;
    let estimates = posterior_estimator(&aug, &samples)?;
    let report = to_toml(&InferReport {
        true_type: a.true_type,
        samples: a.samples,
        horizon: a.horizon,
        estimates,
        x: x.values().to_vec(),
    })?;
    emit(stdout, &report)?;
    let mut manifest = RunManifest::new("infer", &loaded, Some(a.seed), argv);
    manifest
        .set("true_type", a.true_type as i64)
        .set("horizon", a.horizon as i64)
        .set("samples", a.samples as i64)
        .set_floats("x", x.values());
    save(a.out.as_deref(), "infer.toml", &report, manifest)
}

/// `|a - f| / max(|f|, 1e-3 ||f||_inf, 1e-12)` per component.
pub fn relative_errors(analytic: &[f64], reference: &[f64]) -> Vec<f64> {
    let scale = reference.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(reference)
        .map(|(a, f)| (a - f).abs() / f.abs().max(1e-3 * scale).max(1e-12))
        .collect()
}

#[derive(Debug, Serialize)]
struct GradcheckReport {
    mode: String,
    eps: f64,
    x: Vec<f64>,
    analytic: Vec<f64>,
    finite_difference: Vec<f64>,
    /// Norm of the entropy part of the analytic gradient.
    entropy_block_norm: f64,
    max_rel_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    std_error: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_z: Option<f64>,
}

/// Derivative of `f` along coordinate `j`: central where the box allows it,
/// second-order one-sided at a bound.
fn finite_difference(
    x: &[f64],
    j: usize,
    eps: f64,
    max_value: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<f64> {
    let at = |d: f64| {
        let mut v = x.to_vec();
        v[j] += d;
        v
    };
    if x[j] - eps >= 0.0 && x[j] + eps <= max_value {
        Ok((f(&at(eps))? - f(&at(-eps))?) / (2.0 * eps))
    } else {
        let h = if x[j] - eps < 0.0 { eps } else { -eps };
        Ok((-3.0 * f(&at(0.0))? + 4.0 * f(&at(h))? - f(&at(2.0 * h))?) / (2.0 * h))
    }
}

fn cmd_gradcheck(a: &GradcheckArgs, argv: &[String], stdout: &mut dyn Write) -> Result<()> {
    if !(a.eps > 0.0 && a.eps.is_finite()) {
        return Err(CliError::Usage(format!("--eps must be positive, got {}", a.eps)));
    }
    let loaded = load(&a.config.config)?;
    let problem = build_problem(&loaded.grid)?;
    let x = resolve_payment(&a.payment, &loaded, &problem)?;
    let config = objective_config(&a.sampling, a.beta);
    config.validate()?;
    let tg = total_gradient(&x, &problem, &config)?;
    let exact = ObjectiveConfig {
        entropy_mode: EntropyMode::Exact,
        ..config.clone()
    };
    let mut fd = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        fd.push(finite_difference(x.values(), j, a.eps, problem.max_value(), |v| {
            Ok(objective(&problem.payment(v.to_vec())?, &problem, &exact)?.objective)
        })?);
    }
    let rel = relative_errors(&tg.gradient, &fd);
    let max_rel_error = rel.iter().fold(0.0_f64, |m, v| m.max(*v));

    let (std_error, max_z) = match a.sampling.mode {
        EntropyMode::Exact => (None, None),
        EntropyMode::Sampled => {
            let se = sampled_x_std_error(&problem, &x, &config)?;
            let z = tg
                .gradient
                .iter()
                .zip(&fd)
                .zip(&se)
                .map(|((g, f), s)| if *s > 0.0 { (g - f).abs() / s } else { f64::INFINITY })
                .fold(0.0_f64, f64::max);
            (Some(se), Some(z))
        }
    };
    let report = to_toml(&GradcheckReport {
        mode: a.sampling.mode.to_string(),
        eps: a.eps,
        x: x.values().to_vec(),
        analytic: tg.gradient.clone(),
        finite_difference: fd,
        entropy_block_norm: tg.entropy_part.iter().map(|v| v * v).sum::<f64>().sqrt(),
        max_rel_error,
        std_error,
        max_z,
    })?;
    emit(stdout, &report)?;
    let mut manifest = RunManifest::new("gradcheck", &loaded, Some(a.sampling.seed), argv);
    manifest
        .set_sampling(&a.sampling)
        .set("beta", a.beta)
        .set("eps", a.eps)
        .set_floats("x", x.values());
    save(a.out.as_deref(), "gradcheck.toml", &report, manifest)
}

/// Standard error of the sampled `dH/dx`, from per-sample terms pulled back
/// through the Q-Jacobian. Uses the same draw as `total_gradient`.
fn sampled_x_std_error(problem: &IncentiveProblem, x: &SidePayment, config: &ObjectiveConfig) -> Result<Vec<f64>> {
    let response = problem.respond(x)?;
    let samples: Vec<_> = sample_observations(&response.aug, config.sample_count, config.horizon, config.seed)?
        .into_iter()
        .map(|(_, y)| y)
        .collect();
    let terms = sampled_entropy_terms(&response.aug, &samples, problem.followers())?;
    let jac = profile_q_jacobian(problem.followers(), &response.solutions, x)?;
    let pulled = terms
        .iter()
        .map(|(_, g)| jac.pull_back(g))
        .collect::<incentive_core::Result<Vec<_>>>()?;
    let k = pulled.len() as f64;
    let mut se = vec![0.0; x.len()];
    if pulled.len() < 2 {
        return Ok(se);
    }
    for (j, s) in se.iter_mut().enumerate() {
        let mean = pulled.iter().map(|p| p[j]).sum::<f64>() / k;
        let var = pulled.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / (k - 1.0);
        *s = (var / k).sqrt();
    }
    Ok(se)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                return emit(stdout, &e.render().to_string());
            }
            return Err(CliError::Usage(e.render().to_string()));
        }
    };
    match &cli.command {
        Command::Solve(a) => cmd_solve(a, &argv, stdout),
        Command::Entropy(a) => cmd_entropy(a, &argv, stdout),
        Command::Optimize(a) => cmd_optimize(a, &argv, stdout),
        Command::Infer(a) => cmd_infer(a, &argv, stdout),
        Command::Gradcheck(a) => cmd_gradcheck(a, &argv, stdout),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_format_is_fixed_width() {
        assert_eq!(fmt_num(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_num(-2.0), "-2.0000000000000000e0");
        assert_eq!(fmt_num(0.1).parse::<f64>().unwrap(), 0.1);
    }

    #[test]
    fn relative_error_uses_a_floor() {
        let r = relative_errors(&[1.0, 1e-9], &[1.0 + 1e-6, 0.0]);
        assert!(r[0] < 1.1e-6);
        assert!(r[1] < 1e-5);
        assert_eq!(relative_errors(&[0.0], &[0.0]), vec![0.0]);
    }

    #[test]
    fn trace_header_lists_support() {
        assert_eq!(trace_header(2).join(","), "iter,x0,x1,H,h,J,gnorm");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage(String::new()).exit_code(), 1);
        assert_eq!(CliError::from(incentive_core::Error::Config("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(incentive_core::Error::ZeroEvidence).exit_code(), 3);
    }

    #[test]
    fn one_sided_difference_at_the_bound() {
        let d = finite_difference(&[0.0], 0, 1e-4, 10.0, |v| Ok(v[0] * v[0] + 3.0 * v[0])).unwrap();
        assert!((d - 3.0).abs() < 1e-9);
        let d = finite_difference(&[10.0], 0, 1e-4, 10.0, |v| Ok(v[0] * v[0])).unwrap();
        assert!((d - 20.0).abs() < 1e-7);
    }
}
