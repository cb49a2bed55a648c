//! Command-line frontend for the psmas library.
//!
//! Every subcommand writes its result files plus a `manifest.json` recording
//! the fully resolved configuration, the sha256 digest of every file input,
//! and the seed. A recorded run replays with `--from-manifest`: the manifest
//! must come from the same subcommand, recorded input digests are re-verified
//! before use, and any explicit flag overrides the recorded value.
//!
//! Exit codes: 0 on success, 2 on usage or validation errors, 3 on runtime
//! failures such as unwritable outputs.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use psmas::analysis::{
    alpha_sweep, convergence_study, monte_carlo_violation_rate, sweep_field_scan, ScanGrid,
    ScanRow,
};
use psmas::cost::optimal_epsilon;
use psmas::engine::{run_simulation, Accounting, IdleDelivery, SimConfig, SimTrace, TokenTotals};
use psmas::graph::{generate_benchmark_graph, DependencyGraph, GraphShape};
use psmas::phase::{assign_tpa, assign_wpa, omega_max, PhaseMap, Scheme};

/// Sweep velocity used when neither `--omega` nor `--omega-ratio` is given,
/// as a fraction of the assignment's velocity bound.
const DEFAULT_OMEGA_RATIO: f64 = 0.85;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl From<psmas::graph::GraphError> for CliError {
    fn from(e: psmas::graph::GraphError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<psmas::cost::CostError> for CliError {
    fn from(e: psmas::cost::CostError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<psmas::engine::EngineError> for CliError {
    fn from(e: psmas::engine::EngineError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<psmas::analysis::AnalysisError> for CliError {
    fn from(e: psmas::analysis::AnalysisError) -> Self {
        CliError::Usage(e.to_string())
    }
}

/// Run the CLI on an argument vector (including the program name) and return
/// the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests land here too; they are not failures.
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            3
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "psmas",
    version,
    about = "Phase-scheduled multi-agent coordination: graphs, schedules, simulation, analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a benchmark dependency graph
    GenGraph(GenGraphArgs),
    /// Compute a phase assignment for a graph
    Assign(AssignArgs),
    /// Run one sweep-driven simulation
    Simulate(SimulateArgs),
    /// Scan window widths and sweep velocities over a grid
    SweepField(SweepFieldArgs),
    /// Split token savings across compression settings on a fixed schedule
    AlphaSweep(AlphaSweepArgs),
    /// Estimate per-edge ordering-violation rates by Monte Carlo
    McViolations(McViolationsArgs),
    /// Largest activation window that still meets a quality floor
    OptimalEpsilon(OptimalEpsilonArgs),
    /// Tabulate divergence decay against its geometric envelope
    Convergence(ConvergenceArgs),
}

#[derive(Debug, clap::Args)]
struct CommonArgs {
    /// Directory where result files and manifest.json are written
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    /// Replay a recorded manifest; explicit flags override recorded values
    #[arg(long, value_name = "FILE")]
    from_manifest: Option<PathBuf>,
    /// RNG seed (precedence: this flag, then the manifest, then PSMAS_SEED, then 0)
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Debug, clap::Args)]
#[command(after_help = "Writes graph.json and manifest.json into --out.")]
struct GenGraphArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Graph shape [default: linear-chain]
    #[arg(long, value_enum, value_name = "SHAPE")]
    shape: Option<ShapeArg>,
    /// Number of agents [default: 6]
    #[arg(long, value_name = "N")]
    n: Option<usize>,
    /// Uniform agent latency, seconds [default: 1]
    #[arg(long, value_name = "SECONDS")]
    latency: Option<f64>,
    /// Uniform context cost per agent, tokens [default: 1000]
    #[arg(long, value_name = "TOKENS")]
    tokens: Option<u64>,
    /// Uniform response length per agent, tokens [default: 300]
    #[arg(long, value_name = "TOKENS")]
    response_tokens: Option<u64>,
}

#[derive(Debug, clap::Args)]
#[command(after_help = "Writes phases.json and manifest.json into --out.")]
struct AssignArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dependency graph JSON file
    #[arg(long, value_name = "FILE")]
    graph: Option<PathBuf>,
    /// Phase assignment scheme [default: tpa]
    #[arg(long, value_enum, value_name = "SCHEME")]
    scheme: Option<SchemeArg>,
}

#[derive(Debug, clap::Args)]
#[command(after_help = "Writes trace.csv, summary.json, and manifest.json into --out.")]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dependency graph JSON file
    #[arg(long, value_name = "FILE")]
    graph: Option<PathBuf>,
    /// Phase assignment scheme [default: tpa]
    #[arg(long, value_enum, value_name = "SCHEME")]
    scheme: Option<SchemeArg>,
    /// Activation window width, radians [default: 0.9]
    #[arg(long, value_name = "RADIANS")]
    epsilon: Option<f64>,
    /// Sweep velocity, rad/s (absolute; conflicts with --omega-ratio)
    #[arg(long, value_name = "RAD_PER_S", conflicts_with = "omega_ratio")]
    omega: Option<f64>,
    /// Sweep velocity as a fraction of the scheme's velocity bound [default: 0.85]
    #[arg(long, value_name = "FRACTION")]
    omega_ratio: Option<f64>,
    /// Detection step, seconds; 0 picks a step that resolves the window [default: 0]
    #[arg(long, value_name = "SECONDS")]
    dt: Option<f64>,
    /// Idle summary size, tokens per context token (conflicts with --no-summaries) [default: 0.12]
    #[arg(long, value_name = "FRACTION", conflicts_with = "no_summaries")]
    alpha: Option<f64>,
    /// Deliver nothing to idle agents
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    no_summaries: Option<bool>,
    /// Latency noise spread, fraction of the largest agent latency [default: 0]
    #[arg(long, value_name = "FRACTION")]
    sigma: Option<f64>,
    /// Number of sweep cycles [default: 10]
    #[arg(long, value_name = "N")]
    cycles: Option<usize>,
    /// Enable the sweep-velocity controller [default: false]
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    controller: Option<bool>,
    /// Controller proportional gain [default: 0.2]
    #[arg(long, value_name = "GAIN")]
    kp: Option<f64>,
    /// Controller integral gain [default: 0.05]
    #[arg(long, value_name = "GAIN")]
    ki: Option<f64>,
    /// Stop once divergence falls to this fraction of its start; 0 never stops [default: 0.01]
    #[arg(long, value_name = "FRACTION")]
    convergence_threshold: Option<f64>,
    /// Measured cost column for reports [default: analytic]
    #[arg(long, value_enum, value_name = "MODE")]
    accounting: Option<AccountingArg>,
    /// Context length at the start of the run, tokens [default: 1000]
    #[arg(long, value_name = "TOKENS")]
    initial_context: Option<f64>,
    /// Record per-step sweep state in the trace [default: false]
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    record_steps: Option<bool>,
}

#[derive(Debug, clap::Args)]
#[command(after_help = "Writes scan.csv and manifest.json into --out.")]
struct SweepFieldArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dependency graph JSON file
    #[arg(long, value_name = "FILE")]
    graph: Option<PathBuf>,
    /// Phase assignment scheme [default: tpa]
    #[arg(long, value_enum, value_name = "SCHEME")]
    scheme: Option<SchemeArg>,
    /// Smallest window width, radians [default: 0.2]
    #[arg(long, value_name = "RADIANS")]
    eps_min: Option<f64>,
    /// Largest window width, radians [default: 2*pi]
    #[arg(long, value_name = "RADIANS")]
    eps_max: Option<f64>,
    /// Number of window grid points [default: 12]
    #[arg(long, value_name = "N")]
    eps_steps: Option<usize>,
    /// Smallest velocity, fraction of the scheme's bound [default: 0.5]
    #[arg(long, value_name = "FRACTION")]
    ratio_min: Option<f64>,
    /// Largest velocity, fraction of the scheme's bound [default: 1.1]
    #[arg(long, value_name = "FRACTION")]
    ratio_max: Option<f64>,
    /// Number of velocity grid points [default: 7]
    #[arg(long, value_name = "N")]
    ratio_steps: Option<usize>,
    /// Simulation runs per grid point [default: 5]
    #[arg(long, value_name = "N")]
    trials: Option<usize>,
    /// Idle summary size, tokens per context token (conflicts with --no-summaries) [default: 0.12]
    #[arg(long, value_name = "FRACTION", conflicts_with = "no_summaries")]
    alpha: Option<f64>,
    /// Deliver nothing to idle agents
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    no_summaries: Option<bool>,
    /// Latency noise spread, fraction of the largest agent latency [default: 0]
    #[arg(long, value_name = "FRACTION")]
    sigma: Option<f64>,
    /// Sweep cycles per run [default: 10]
    #[arg(long, value_name = "N")]
    cycles: Option<usize>,
    /// Detection step, seconds; 0 picks a step that resolves the window [default: 0]
    #[arg(long, value_name = "SECONDS")]
    dt: Option<f64>,
}

#[derive(Debug, clap::Args)]
#[command(after_help = "Writes alpha_sweep.csv and manifest.json into --out.")]
struct AlphaSweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dependency graph JSON file
    #[arg(long, value_name = "FILE")]
    graph: Option<PathBuf>,
    /// Phase assignment scheme [default: tpa]
    #[arg(long, value_enum, value_name = "SCHEME")]
    scheme: Option<SchemeArg>,
    /// Compression settings to compare, comma separated [default: 0.12,0.2,0.3,0.4]
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    /// Activation window width, radians [default: 0.9]
    #[arg(long, value_name = "RADIANS")]
    epsilon: Option<f64>,
    /// Sweep velocity, rad/s (absolute; conflicts with --omega-ratio)
    #[arg(long, value_name = "RAD_PER_S", conflicts_with = "omega_ratio")]
    omega: Option<f64>,
    /// Sweep velocity as a fraction of the scheme's velocity bound [default: 0.85]
    #[arg(long, value_name = "FRACTION")]
    omega_ratio: Option<f64>,
    /// Latency noise spread, fraction of the largest agent latency [default: 0]
    #[arg(long, value_name = "FRACTION")]
    sigma: Option<f64>,
    /// Sweep cycles per run [default: 10]
    #[arg(long, value_name = "N")]
    cycles: Option<usize>,
    /// Detection step, seconds; 0 picks a step that resolves the window [default: 0]
    #[arg(long, value_name = "SECONDS")]
    dt: Option<f64>,
}

#[derive(Debug, clap::Args)]
#[command(after_help = "Writes violations.csv and manifest.json into --out.")]
struct McViolationsArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dependency graph JSON file
    #[arg(long, value_name = "FILE")]
    graph: Option<PathBuf>,
    /// Phase assignment scheme [default: tpa]
    #[arg(long, value_enum, value_name = "SCHEME")]
    scheme: Option<SchemeArg>,
    /// Sweep velocity, rad/s (absolute; conflicts with --omega-ratio)
    #[arg(long, value_name = "RAD_PER_S", conflicts_with = "omega_ratio")]
    omega: Option<f64>,
    /// Sweep velocity as a fraction of the scheme's velocity bound [default: 0.85]
    #[arg(long, value_name = "FRACTION")]
    omega_ratio: Option<f64>,
    /// Latency noise spread, fraction of the largest agent latency [default: 0]
    #[arg(long, value_name = "FRACTION")]
    sigma: Option<f64>,
    /// Number of Monte Carlo trials, at least 1000 [default: 10000]
    #[arg(long, value_name = "N")]
    trials: Option<usize>,
}

#[derive(Debug, clap::Args)]
#[command(after_help = "Writes epsilon_star.json and manifest.json into --out.")]
struct OptimalEpsilonArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Quality floor, fraction of full-context quality [default: 0.95]
    #[arg(long, value_name = "FRACTION")]
    q_min: Option<f64>,
    /// Quality margin above the floor [default: 0.04]
    #[arg(long, value_name = "FRACTION")]
    delta_q: Option<f64>,
    /// Idle summary size, tokens per context token [default: 0.12]
    #[arg(long, value_name = "FRACTION")]
    alpha: Option<f64>,
    /// Reference context length, tokens [default: 50000]
    #[arg(long, value_name = "TOKENS")]
    l_bar: Option<f64>,
}

#[derive(Debug, clap::Args)]
#[command(after_help = "Writes convergence.csv and manifest.json into --out.")]
struct ConvergenceArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Window widths to study, radians, comma separated [default: 0.3,0.9,1.5]
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    epsilons: Option<Vec<f64>>,
    /// Compression settings to study, comma separated [default: 0.12,0.3,1.0]
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    /// Sweep cycles per pair [default: 10]
    #[arg(long, value_name = "N")]
    cycles: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ShapeArg {
    LinearChain,
    TwoBranchMerge,
    ForkDag,
}

impl ShapeArg {
    fn to_shape(self) -> GraphShape {
        match self {
            ShapeArg::LinearChain => GraphShape::LinearChain,
            ShapeArg::TwoBranchMerge => GraphShape::TwoBranchMerge,
            ShapeArg::ForkDag => GraphShape::ForkDag,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum SchemeArg {
    Tpa,
    Wpa,
}

impl SchemeArg {
    fn to_scheme(self) -> Scheme {
        match self {
            SchemeArg::Tpa => Scheme::Tpa,
            SchemeArg::Wpa => Scheme::Wpa,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AccountingArg {
    Analytic,
    Event,
}

impl AccountingArg {
    fn to_accounting(self) -> Accounting {
        match self {
            AccountingArg::Analytic => Accounting::Analytic,
            AccountingArg::Event => Accounting::Event,
        }
    }
}

/// Record of one CLI run: the resolved configuration, input digests, seed,
/// and tool version. Written next to the result files as `manifest.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub seed: u64,
    pub tool_version: String,
}

/// Path and sha256 digest of one file input, as consumed by a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Contents of `summary.json` written by `simulate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub violations: usize,
    pub cycles: usize,
    pub token_totals: TokenTotals,
    pub converged_at: Option<usize>,
}

/// Contents of `epsilon_star.json` written by `optimal-epsilon`. `saturated`
/// means the whole circle already satisfies the floor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpsilonStarReport {
    pub q_min: f64,
    pub delta_q: f64,
    pub alpha: f64,
    pub l_bar: f64,
    pub epsilon_star: f64,
    pub saturated: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenGraphConfig {
    shape: ShapeArg,
    n: usize,
    latency_s: f64,
    cost_tokens: u64,
    response_tokens: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AssignConfig {
    graph: String,
    scheme: SchemeArg,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    graph: String,
    scheme: SchemeArg,
    sim: SimConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFieldConfig {
    graph: String,
    scheme: SchemeArg,
    eps_min: f64,
    eps_max: f64,
    eps_steps: usize,
    ratio_min: f64,
    ratio_max: f64,
    ratio_steps: usize,
    trials: usize,
    template: SimConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AlphaSweepConfig {
    graph: String,
    scheme: SchemeArg,
    alphas: Vec<f64>,
    template: SimConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct McViolationsConfig {
    graph: String,
    scheme: SchemeArg,
    omega: f64,
    sigma_ratio: f64,
    trials: usize,
    seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimalEpsilonConfig {
    q_min: f64,
    delta_q: f64,
    alpha: f64,
    l_bar: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvergenceConfig {
    epsilons: Vec<f64>,
    alphas: Vec<f64>,
    cycles: usize,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenGraph(args) => run_gen_graph(args),
        Command::Assign(args) => run_assign(args),
        Command::Simulate(args) => run_simulate(args),
        Command::SweepField(args) => run_sweep_field(args),
        Command::AlphaSweep(args) => run_alpha_sweep(args),
        Command::McViolations(args) => run_mc_violations(args),
        Command::OptimalEpsilon(args) => run_optimal_epsilon(args),
        Command::Convergence(args) => run_convergence(args),
    }
}

fn run_gen_graph(args: GenGraphArgs) -> Result<(), CliError> {
    let manifest = load_manifest(&args.common, "gen-graph")?;
    let base: Option<GenGraphConfig> = read_config(manifest.as_ref())?;
    let seed = resolve_seed(args.common.seed, manifest.as_ref())?;
    let config = GenGraphConfig {
        shape: pick(args.shape, base.as_ref().map(|b| b.shape), ShapeArg::LinearChain),
        n: pick(args.n, base.as_ref().map(|b| b.n), 6),
        latency_s: pick(args.latency, base.as_ref().map(|b| b.latency_s), 1.0),
        cost_tokens: pick(args.tokens, base.as_ref().map(|b| b.cost_tokens), 1000),
        response_tokens: pick(args.response_tokens, base.as_ref().map(|b| b.response_tokens), 300),
    };
    let g = generate_benchmark_graph(config.shape.to_shape(), config.n, config.latency_s, config.cost_tokens)?
        .with_response_tokens(config.response_tokens);
    let out = prepare_out(&args.common)?;
    write_atomic(&out.join("graph.json"), &to_pretty(&g)?)?;
    write_run_manifest(&out, "gen-graph", &config, Vec::new(), seed)
}

fn run_assign(args: AssignArgs) -> Result<(), CliError> {
    let manifest = load_manifest(&args.common, "assign")?;
    let base: Option<AssignConfig> = read_config(manifest.as_ref())?;
    let seed = resolve_seed(args.common.seed, manifest.as_ref())?;
    let input = load_graph(
        args.graph.as_ref(),
        base.as_ref().map(|b| b.graph.as_str()),
        manifest.as_ref(),
    )?;
    let scheme = pick(args.scheme, base.as_ref().map(|b| b.scheme), SchemeArg::Tpa);
    let phases = assign(&input.graph, scheme);
    let out = prepare_out(&args.common)?;
    write_atomic(&out.join("phases.json"), &to_pretty(&phases)?)?;
    let config = AssignConfig { graph: input.path.clone(), scheme };
    write_run_manifest(&out, "assign", &config, vec![input.digest], seed)
}

fn run_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let manifest = load_manifest(&args.common, "simulate")?;
    let base: Option<SimulateConfig> = read_config(manifest.as_ref())?;
    let seed = resolve_seed(args.common.seed, manifest.as_ref())?;
    let input = load_graph(
        args.graph.as_ref(),
        base.as_ref().map(|b| b.graph.as_str()),
        manifest.as_ref(),
    )?;
    let scheme = pick(args.scheme, base.as_ref().map(|b| b.scheme), SchemeArg::Tpa);
    let phases = assign(&input.graph, scheme);
    let w_max = omega_max(&input.graph, scheme.to_scheme());

    let b = base.as_ref().map(|b| &b.sim);
    let d = SimConfig { record_steps: false, ..SimConfig::default() };
    let sim = SimConfig {
        epsilon: pick(args.epsilon, b.map(|s| s.epsilon), d.epsilon),
        omega: resolve_omega(args.omega, args.omega_ratio, b.map(|s| s.omega), w_max)?,
        dt: pick(args.dt, b.map(|s| s.dt), d.dt),
        idle_delivery: resolve_idle(args.alpha, args.no_summaries, b.map(|s| s.idle_delivery)),
        sigma_ratio: pick(args.sigma, b.map(|s| s.sigma_ratio), d.sigma_ratio),
        max_cycles: pick(args.cycles, b.map(|s| s.max_cycles), d.max_cycles),
        seed,
        controller_enabled: pick(args.controller, b.map(|s| s.controller_enabled), d.controller_enabled),
        kp: pick(args.kp, b.map(|s| s.kp), d.kp),
        ki: pick(args.ki, b.map(|s| s.ki), d.ki),
        convergence_threshold: pick(
            args.convergence_threshold,
            b.map(|s| s.convergence_threshold),
            d.convergence_threshold,
        ),
        accounting: pick(
            args.accounting.map(AccountingArg::to_accounting),
            b.map(|s| s.accounting),
            d.accounting,
        ),
        initial_context_tokens: pick(
            args.initial_context,
            b.map(|s| s.initial_context_tokens),
            d.initial_context_tokens,
        ),
        record_steps: pick(args.record_steps, b.map(|s| s.record_steps), d.record_steps),
    };

    let trace = run_simulation(&input.graph, &phases, &sim)?;
    let out = prepare_out(&args.common)?;
    write_atomic(&out.join("trace.csv"), &trace_csv(&trace, &phases)?)?;
    let summary = RunSummary {
        violations: trace.violations.len(),
        cycles: trace.cycles_completed,
        token_totals: trace.token_ledger.totals,
        converged_at: trace.converged_at,
    };
    write_atomic(&out.join("summary.json"), &to_pretty(&summary)?)?;
    let config = SimulateConfig { graph: input.path.clone(), scheme, sim };
    write_run_manifest(&out, "simulate", &config, vec![input.digest], seed)
}

fn run_sweep_field(args: SweepFieldArgs) -> Result<(), CliError> {
    let manifest = load_manifest(&args.common, "sweep-field")?;
    let base: Option<SweepFieldConfig> = read_config(manifest.as_ref())?;
    let seed = resolve_seed(args.common.seed, manifest.as_ref())?;
    let input = load_graph(
        args.graph.as_ref(),
        base.as_ref().map(|b| b.graph.as_str()),
        manifest.as_ref(),
    )?;
    let scheme = pick(args.scheme, base.as_ref().map(|b| b.scheme), SchemeArg::Tpa);
    let phases = assign(&input.graph, scheme);

    let eps_min = pick(args.eps_min, base.as_ref().map(|b| b.eps_min), 0.2);
    let eps_max = pick(args.eps_max, base.as_ref().map(|b| b.eps_max), TAU);
    let eps_steps = pick(args.eps_steps, base.as_ref().map(|b| b.eps_steps), 12);
    let ratio_min = pick(args.ratio_min, base.as_ref().map(|b| b.ratio_min), 0.5);
    let ratio_max = pick(args.ratio_max, base.as_ref().map(|b| b.ratio_max), 1.1);
    let ratio_steps = pick(args.ratio_steps, base.as_ref().map(|b| b.ratio_steps), 7);
    let trials = pick(args.trials, base.as_ref().map(|b| b.trials), 5);
    validate_axis("--eps", eps_min, eps_max, eps_steps)?;
    validate_axis("--ratio", ratio_min, ratio_max, ratio_steps)?;
    if trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }

    let mut template = base.as_ref().map(|b| b.template.clone()).unwrap_or_else(|| SimConfig {
        convergence_threshold: 0.0,
        record_steps: false,
        ..SimConfig::default()
    });
    if let Some(dt) = args.dt {
        template.dt = dt;
    }
    template.idle_delivery = resolve_idle(args.alpha, args.no_summaries, Some(template.idle_delivery));
    if let Some(s) = args.sigma {
        template.sigma_ratio = s;
    }
    if let Some(c) = args.cycles {
        template.max_cycles = c;
    }
    template.seed = seed;
    template.record_steps = false;
    // Inert placeholders; the scan overrides both fields per grid point.
    template.epsilon = eps_min;
    template.omega = 1.0;

    let grid = ScanGrid {
        epsilons: linspace(eps_min, eps_max, eps_steps),
        omega_ratios: linspace(ratio_min, ratio_max, ratio_steps),
        trials,
    };
    let rows = sweep_field_scan(&input.graph, &phases, &grid, &template)?;
    let out = prepare_out(&args.common)?;
    write_atomic(&out.join("scan.csv"), &scan_csv(&rows)?)?;
    let config = SweepFieldConfig {
        graph: input.path.clone(),
        scheme,
        eps_min,
        eps_max,
        eps_steps,
        ratio_min,
        ratio_max,
        ratio_steps,
        trials,
        template,
    };
    write_run_manifest(&out, "sweep-field", &config, vec![input.digest], seed)
}

fn run_alpha_sweep(args: AlphaSweepArgs) -> Result<(), CliError> {
    let manifest = load_manifest(&args.common, "alpha-sweep")?;
    let base: Option<AlphaSweepConfig> = read_config(manifest.as_ref())?;
    let seed = resolve_seed(args.common.seed, manifest.as_ref())?;
    let input = load_graph(
        args.graph.as_ref(),
        base.as_ref().map(|b| b.graph.as_str()),
        manifest.as_ref(),
    )?;
    let scheme = pick(args.scheme, base.as_ref().map(|b| b.scheme), SchemeArg::Tpa);
    let phases = assign(&input.graph, scheme);
    let w_max = omega_max(&input.graph, scheme.to_scheme());

    let alphas = pick(
        args.alphas,
        base.as_ref().map(|b| b.alphas.clone()),
        vec![0.12, 0.2, 0.3, 0.4],
    );
    if alphas.is_empty() {
        return Err(CliError::Usage("--alphas needs at least one value".into()));
    }
    let mut template = base.as_ref().map(|b| b.template.clone()).unwrap_or_else(|| SimConfig {
        convergence_threshold: 0.0,
        record_steps: false,
        ..SimConfig::default()
    });
    if let Some(e) = args.epsilon {
        template.epsilon = e;
    }
    template.omega = resolve_omega(args.omega, args.omega_ratio, base.as_ref().map(|b| b.template.omega), w_max)?;
    if let Some(s) = args.sigma {
        template.sigma_ratio = s;
    }
    if let Some(c) = args.cycles {
        template.max_cycles = c;
    }
    if let Some(dt) = args.dt {
        template.dt = dt;
    }
    template.seed = seed;
    template.convergence_threshold = 0.0;
    template.record_steps = false;

    let rows = alpha_sweep(&input.graph, &phases, &alphas, &template)?;
    let out = prepare_out(&args.common)?;
    let cells = rows
        .iter()
        .map(|r| {
            vec![
                sig12(r.alpha),
                sig12(r.token_cost_fraction),
                sig12(r.scheduling_gain),
                sig12(r.compression_gain),
            ]
        })
        .collect();
    let bytes = csv_bytes(
        &["alpha", "token_cost_fraction", "scheduling_gain", "compression_gain"],
        cells,
    )?;
    write_atomic(&out.join("alpha_sweep.csv"), &bytes)?;
    let config = AlphaSweepConfig { graph: input.path.clone(), scheme, alphas, template };
    write_run_manifest(&out, "alpha-sweep", &config, vec![input.digest], seed)
}

fn run_mc_violations(args: McViolationsArgs) -> Result<(), CliError> {
    let manifest = load_manifest(&args.common, "mc-violations")?;
    let base: Option<McViolationsConfig> = read_config(manifest.as_ref())?;
    let seed = resolve_seed(args.common.seed, manifest.as_ref())?;
    let input = load_graph(
        args.graph.as_ref(),
        base.as_ref().map(|b| b.graph.as_str()),
        manifest.as_ref(),
    )?;
    let scheme = pick(args.scheme, base.as_ref().map(|b| b.scheme), SchemeArg::Tpa);
    let phases = assign(&input.graph, scheme);
    let w_max = omega_max(&input.graph, scheme.to_scheme());

    let omega = resolve_omega(args.omega, args.omega_ratio, base.as_ref().map(|b| b.omega), w_max)?;
    let sigma_ratio = pick(args.sigma, base.as_ref().map(|b| b.sigma_ratio), 0.0);
    let trials = pick(args.trials, base.as_ref().map(|b| b.trials), 10_000);

    let rows = monte_carlo_violation_rate(&input.graph, &phases, omega, sigma_ratio, trials, seed)?;
    let out = prepare_out(&args.common)?;
    let cells = rows
        .iter()
        .map(|r| {
            vec![
                r.from.clone(),
                r.to.clone(),
                sig12(r.slack_s),
                sig12(r.empirical_rate),
                sig12(r.analytic_bound),
                sig12(r.stderr),
            ]
        })
        .collect();
    let bytes = csv_bytes(
        &["from", "to", "slack_s", "empirical_rate", "analytic_bound", "stderr"],
        cells,
    )?;
    write_atomic(&out.join("violations.csv"), &bytes)?;
    let config = McViolationsConfig { graph: input.path.clone(), scheme, omega, sigma_ratio, trials, seed };
    write_run_manifest(&out, "mc-violations", &config, vec![input.digest], seed)
}

fn run_optimal_epsilon(args: OptimalEpsilonArgs) -> Result<(), CliError> {
    let manifest = load_manifest(&args.common, "optimal-epsilon")?;
    let base: Option<OptimalEpsilonConfig> = read_config(manifest.as_ref())?;
    let seed = resolve_seed(args.common.seed, manifest.as_ref())?;
    let config = OptimalEpsilonConfig {
        q_min: pick(args.q_min, base.as_ref().map(|b| b.q_min), 0.95),
        delta_q: pick(args.delta_q, base.as_ref().map(|b| b.delta_q), 0.04),
        alpha: pick(args.alpha, base.as_ref().map(|b| b.alpha), 0.12),
        l_bar: pick(args.l_bar, base.as_ref().map(|b| b.l_bar), 50_000.0),
    };
    let epsilon_star = optimal_epsilon(config.q_min, config.delta_q, config.alpha, config.l_bar)?;
    let report = EpsilonStarReport {
        q_min: config.q_min,
        delta_q: config.delta_q,
        alpha: config.alpha,
        l_bar: config.l_bar,
        epsilon_star,
        saturated: epsilon_star >= TAU,
    };
    let out = prepare_out(&args.common)?;
    write_atomic(&out.join("epsilon_star.json"), &to_pretty(&report)?)?;
    write_run_manifest(&out, "optimal-epsilon", &config, Vec::new(), seed)
}

fn run_convergence(args: ConvergenceArgs) -> Result<(), CliError> {
    let manifest = load_manifest(&args.common, "convergence")?;
    let base: Option<ConvergenceConfig> = read_config(manifest.as_ref())?;
    let seed = resolve_seed(args.common.seed, manifest.as_ref())?;
    let config = ConvergenceConfig {
        epsilons: pick(args.epsilons, base.as_ref().map(|b| b.epsilons.clone()), vec![0.3, 0.9, 1.5]),
        alphas: pick(args.alphas, base.as_ref().map(|b| b.alphas.clone()), vec![0.12, 0.3, 1.0]),
        cycles: pick(args.cycles, base.as_ref().map(|b| b.cycles), 10),
    };
    if config.epsilons.is_empty() || config.alphas.is_empty() {
        return Err(CliError::Usage("--epsilons and --alphas each need at least one value".into()));
    }
    let rows = convergence_study(&config.epsilons, &config.alphas, config.cycles)?;
    let out = prepare_out(&args.common)?;
    let cells = rows
        .iter()
        .map(|r| {
            vec![
                sig12(r.epsilon),
                sig12(r.alpha),
                sig12(r.factor),
                sig12(r.d_k),
                r.bound_satisfied.to_string(),
            ]
        })
        .collect();
    let bytes = csv_bytes(&["epsilon", "alpha", "factor", "d_k", "bound_satisfied"], cells)?;
    write_atomic(&out.join("convergence.csv"), &bytes)?;
    write_run_manifest(&out, "convergence", &config, Vec::new(), seed)
}

fn assign(g: &DependencyGraph, scheme: SchemeArg) -> PhaseMap {
    match scheme {
        SchemeArg::Tpa => assign_tpa(g),
        SchemeArg::Wpa => assign_wpa(g),
    }
}

fn pick<T>(flag: Option<T>, recorded: Option<T>, default_value: T) -> T {
    flag.or(recorded).unwrap_or(default_value)
}

fn resolve_omega(
    omega: Option<f64>,
    ratio: Option<f64>,
    recorded: Option<f64>,
    w_max: f64,
) -> Result<f64, CliError> {
    if let Some(w) = omega {
        return Ok(w);
    }
    if let Some(r) = ratio {
        if !r.is_finite() || r <= 0.0 {
            return Err(CliError::Usage("--omega-ratio must be positive and finite".into()));
        }
        return Ok(r * w_max);
    }
    Ok(recorded.unwrap_or(DEFAULT_OMEGA_RATIO * w_max))
}

fn resolve_idle(
    alpha: Option<f64>,
    no_summaries: Option<bool>,
    recorded: Option<IdleDelivery>,
) -> IdleDelivery {
    if let Some(a) = alpha {
        return IdleDelivery::Compressed { alpha: a };
    }
    match no_summaries {
        Some(true) => IdleDelivery::NoSummaries,
        // Re-enabling summaries without --alpha keeps a recorded ratio if
        // there is one, and otherwise falls back to the default.
        Some(false) => match recorded {
            Some(IdleDelivery::Compressed { alpha }) => IdleDelivery::Compressed { alpha },
            _ => SimConfig::default().idle_delivery,
        },
        None => recorded.unwrap_or(SimConfig::default().idle_delivery),
    }
}

fn resolve_seed(flag: Option<u64>, manifest: Option<&RunManifest>) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(m) = manifest {
        return Ok(m.seed);
    }
    match std::env::var("PSMAS_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("PSMAS_SEED must be an unsigned integer, got {v:?}"))),
        Err(std::env::VarError::NotPresent) => Ok(0),
        Err(e) => Err(CliError::Usage(format!("cannot read PSMAS_SEED: {e}"))),
    }
}

fn validate_axis(name: &str, lo: f64, hi: f64, steps: usize) -> Result<(), CliError> {
    if !lo.is_finite() || !hi.is_finite() || lo > hi {
        return Err(CliError::Usage(format!(
            "{name}-min and {name}-max must be finite with min <= max"
        )));
    }
    if steps == 0 {
        return Err(CliError::Usage(format!("{name}-steps must be at least 1")));
    }
    Ok(())
}

fn linspace(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    if steps == 1 {
        return vec![lo];
    }
    (0..steps)
        .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
        .collect()
}

fn load_manifest(common: &CommonArgs, subcommand: &str) -> Result<Option<RunManifest>, CliError> {
    let Some(path) = &common.from_manifest else {
        return Ok(None);
    };
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Usage(format!("cannot read manifest {}: {e}", path.display())))?;
    let manifest: RunManifest = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Usage(format!("malformed manifest {}: {e}", path.display())))?;
    if manifest.subcommand != subcommand {
        return Err(CliError::Usage(format!(
            "manifest {} records a {:?} run, not {:?}",
            path.display(),
            manifest.subcommand,
            subcommand
        )));
    }
    Ok(Some(manifest))
}

fn read_config<T: serde::de::DeserializeOwned>(
    manifest: Option<&RunManifest>,
) -> Result<Option<T>, CliError> {
    let Some(m) = manifest else {
        return Ok(None);
    };
    serde_json::from_value(m.config.clone())
        .map(Some)
        .map_err(|e| CliError::Usage(format!("manifest config does not fit this subcommand: {e}")))
}

struct GraphInput {
    graph: DependencyGraph,
    path: String,
    digest: InputDigest,
}

/// Load the graph from an explicit flag, or fall back to the manifest's
/// recorded path. Only the fallback re-verifies the recorded digest; an
/// explicit override is a new input and just gets digested for the new
/// manifest.
fn load_graph(
    flag: Option<&PathBuf>,
    recorded: Option<&str>,
    manifest: Option<&RunManifest>,
) -> Result<GraphInput, CliError> {
    let (path, check_digest) = match (flag, recorded) {
        (Some(p), _) => (p.to_string_lossy().into_owned(), false),
        (None, Some(p)) => (p.to_string(), true),
        (None, None) => {
            return Err(CliError::Usage(
                "--graph <FILE> is required (or replay one with --from-manifest)".into(),
            ))
        }
    };
    let bytes = std::fs::read(&path)
        .map_err(|e| CliError::Usage(format!("cannot read graph {path}: {e}")))?;
    let sha256 = sha256_hex(&bytes);
    if check_digest {
        let m = manifest.expect("recorded path implies a manifest");
        let entry = m
            .inputs
            .iter()
            .find(|i| i.path == path)
            .ok_or_else(|| CliError::Usage(format!("manifest lists no digest for input {path}")))?;
        if entry.sha256 != sha256 {
            return Err(CliError::Usage(format!(
                "input {path} does not match the manifest (recorded sha256 {}, found {sha256})",
                entry.sha256
            )));
        }
    }
    let graph: DependencyGraph = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Usage(format!("malformed graph {path}: {e}")))?;
    Ok(GraphInput { graph, path: path.clone(), digest: InputDigest { path, sha256 } })
}

fn prepare_out(common: &CommonArgs) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(&common.out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", common.out.display())))?;
    Ok(common.out.clone())
}

fn write_run_manifest(
    out: &Path,
    subcommand: &str,
    config: &impl Serialize,
    inputs: Vec<InputDigest>,
    seed: u64,
) -> Result<(), CliError> {
    let manifest = RunManifest {
        subcommand: subcommand.to_string(),
        config: serde_json::to_value(config)
            .map_err(|e| CliError::Runtime(format!("cannot serialize config: {e}")))?,
        inputs,
        seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    write_atomic(&out.join("manifest.json"), &to_pretty(&manifest)?)
}

fn to_pretty<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| CliError::Runtime(format!("cannot serialize output: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Write through a sibling temp file and rename, so readers never observe a
/// half-written result.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!("{name}.tmp-{}", std::process::id()));
    std::fs::write(&tmp, bytes)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| CliError::Runtime(format!("cannot move {} into place: {e}", path.display())))
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::Digest;
    hex::encode(sha2::Sha256::digest(bytes))
}

/// Rendering used for every float cell in CSV outputs: scientific notation
/// with 12 significant digits, so files are stable to compare and diff.
pub fn sig12(x: f64) -> String {
    format!("{x:.11e}")
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>, CliError> {
    let render = |e: csv::Error| CliError::Runtime(format!("csv rendering: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(render)?;
    for row in rows {
        w.write_record(&row).map_err(render)?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(format!("csv buffer: {e}")))
}

/// Event log of one run, cycle by cycle: invocations in start order, then
/// idle refreshes in agent order, then violations in edge order.
fn trace_csv(trace: &SimTrace, phases: &PhaseMap) -> Result<Vec<u8>, CliError> {
    let theta = |id: &str| {
        phases.phase_of(id).expect("trace agent ids come from the phase map")
    };
    let mut rows = Vec::new();
    let (mut i, mut r, mut v) = (0, 0, 0);
    for cycle in 0..trace.cycles_completed {
        while i < trace.invocations.len() && trace.invocations[i].cycle == cycle {
            let inv = &trace.invocations[i];
            rows.push(vec![
                cycle.to_string(),
                sig12(inv.start_t),
                sig12(theta(&inv.agent_id)),
                inv.agent_id.clone(),
                "invoke".to_string(),
                sig12(inv.duration_s),
                sig12(inv.tokens_in),
                sig12(inv.tokens_out),
                String::new(),
            ]);
            i += 1;
        }
        while r < trace.refreshes.len() && trace.refreshes[r].cycle == cycle {
            let rf = &trace.refreshes[r];
            rows.push(vec![
                cycle.to_string(),
                sig12(rf.t),
                sig12(rf.phi),
                rf.agent_id.clone(),
                "idle_refresh".to_string(),
                String::new(),
                sig12(rf.tokens),
                String::new(),
                String::new(),
            ]);
            r += 1;
        }
        while v < trace.violations.len() && trace.violations[v].cycle == cycle {
            let vi = &trace.violations[v];
            rows.push(vec![
                cycle.to_string(),
                sig12(vi.t),
                sig12(theta(&vi.to)),
                format!("{}->{}", vi.from, vi.to),
                "violation".to_string(),
                String::new(),
                String::new(),
                String::new(),
                sig12(vi.lateness_s),
            ]);
            v += 1;
        }
    }
    csv_bytes(
        &[
            "cycle",
            "t",
            "phi",
            "agent_id",
            "event",
            "duration_s",
            "tokens_in",
            "tokens_out",
            "lateness_s",
        ],
        rows,
    )
}

fn scan_csv(rows: &[ScanRow]) -> Result<Vec<u8>, CliError> {
    let opt = |x: Option<f64>| x.map(sig12).unwrap_or_default();
    let cells = rows
        .iter()
        .map(|row| {
            vec![
                sig12(row.epsilon),
                sig12(row.omega_ratio),
                sig12(row.f),
                sig12(row.rho_theory),
                opt(row.sim_token_fraction),
                opt(row.event_token_fraction),
                opt(row.violation_rate),
                row.regime.map(|g| g.to_string()).unwrap_or_default(),
                row.note.clone(),
            ]
        })
        .collect();
    csv_bytes(
        &[
            "epsilon",
            "omega_ratio",
            "f",
            "rho_theory",
            "sim_token_fraction",
            "event_token_fraction",
            "violation_rate",
            "regime",
            "note",
        ],
        cells,
    )
}
