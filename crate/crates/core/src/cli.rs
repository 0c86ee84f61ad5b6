//! Command-line driver: JSON configs, run manifests and the subcommands.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration error, 3 numerical
//! failure, 4 quality gate (too many flagged windows, unexpected coverage
//! breakdown).

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cascade::{self, CascadeConfig, CascadeError, Fallback};
use crate::conformal::{self, ConformalCalibration, ConformalError, CoverageReport, InducedBands};
use crate::dae::{DaeError, DaeSystem, InputSchedule, SystemConfig};
use crate::integrate::{self, IntegrateError, IntegratorConfig, Projection};
use crate::newton::{self, NewtonConfig};
use crate::operator::{Activation, OperatorError, OperatorNet, Precision};
use crate::train::{self, LossMode, RolloutConfig, TrainConfig, TrainError, WindowClock, WindowSampler};
use crate::trajectory::{Trajectory, TrajectoryError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("quality gate: {0}")]
    Quality(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io { .. } => 1,
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Quality(_) => 4,
        }
    }
}

impl From<DaeError> for CliError {
    fn from(e: DaeError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<IntegrateError> for CliError {
    fn from(e: IntegrateError) -> Self {
        match e {
            IntegrateError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::OutputMismatch { .. } | TrainError::Dae(_) => CliError::Config(e.to_string()),
            TrainError::Operator(op) => op.into(),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<OperatorError> for CliError {
    fn from(e: OperatorError) -> Self {
        match e {
            OperatorError::TauOutOfRange(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<ConformalError> for CliError {
    fn from(e: ConformalError) -> Self {
        match e {
            ConformalError::Mismatch { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<CascadeError> for CliError {
    fn from(e: CascadeError) -> Self {
        match e {
            CascadeError::Invalid(_) => CliError::Config(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<TrajectoryError> for CliError {
    fn from(e: TrajectoryError) -> Self {
        match e {
            TrajectoryError::Io { path, source } => CliError::Io { path: path.into(), source },
            other => CliError::Config(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "daenet", version, about = "Operator surrogates for stiff index-1 DAEs")]
pub struct Cli {
    /// Worker threads (0 = all cores). With 1, numeric outputs are bit-reproducible.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Output directory. Defaults to $DAENET_OUT/<command>, then ./daenet-out/<command>.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate a system with Radau IIA and write the trajectory.
    Reference(ReferenceArgs),
    /// Train an operator surrogate from physics residuals only.
    Train(TrainArgs),
    /// Roll a trained surrogate out over recursive windows and compare with a reference.
    Rollout(RolloutArgs),
    /// Calibrate split-conformal bands on a scenario pool.
    Calibrate(CalibrateArgs),
    /// Evaluate band coverage on a test or shifted pool.
    Coverage(CoverageArgs),
    /// Window-length and partition sweeps.
    Ablate(AblateArgs),
    /// Cascaded Newton on constructed coupled systems.
    CascadeDemo(CascadeDemoArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Reference(_) => "reference",
            Command::Train(_) => "train",
            Command::Rollout(_) => "rollout",
            Command::Calibrate(_) => "calibrate",
            Command::Coverage(_) => "coverage",
            Command::Ablate(_) => "ablate",
            Command::CascadeDemo(_) => "cascade-demo",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProjectArg {
    Algebraic,
    QuasiSteady,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Extended,
    Standard,
    Penalty,
}

impl From<ModeArg> for LossMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Extended => LossMode::ExtendedNewton,
            ModeArg::Standard => LossMode::StandardNewton,
            ModeArg::Penalty => LossMode::Penalty,
        }
    }
}

#[derive(Debug, Args)]
pub struct ReferenceArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Make the initial condition consistent before integrating.
    #[arg(long, value_enum)]
    pub project: Option<ProjectArg>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Robertson only: predict `(y1, y3)` and solve only `f_fast = 0`.
    #[arg(long)]
    pub ode_formulation: bool,
    /// Seeds both the network initialization and the window sampler.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CoverageArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Calibration artifact written by `calibrate`.
    #[arg(long)]
    pub calibration: PathBuf,
    /// Evaluate on the shifted pool instead of the test pool.
    #[arg(long)]
    pub ood_pool: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct CascadeDemoArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Config files

fn default_true() -> bool {
    true
}

fn default_alpha() -> f64 {
    0.1
}

fn default_split() -> f64 {
    0.5
}

fn default_rtol() -> f64 {
    1e-8
}

fn default_atol() -> f64 {
    1e-10
}

/// Tolerances of reference integrations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceTolerance {
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    #[serde(default = "default_atol")]
    pub atol: f64,
}

impl Default for ReferenceTolerance {
    fn default() -> Self {
        Self { rtol: default_rtol(), atol: default_atol() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    pub system: SystemConfig,
    pub x0: Vec<f64>,
    #[serde(default)]
    pub z0: Vec<f64>,
    #[serde(default)]
    pub input: InputSchedule,
    pub integrator: IntegratorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub n_basis: usize,
    pub hidden_width: usize,
    pub depth: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub system: SystemConfig,
    pub net: NetSpec,
    pub train: TrainConfig,
    /// Write an intermediate checkpoint every this many epochs (0 = final only).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Sampler for `--ode-formulation`; derived from `train.sampler` when absent.
    #[serde(default)]
    pub ode_sampler: Option<WindowSampler>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutFile {
    pub system: SystemConfig,
    pub x0: Vec<f64>,
    #[serde(default)]
    pub z0: Vec<f64>,
    #[serde(default)]
    pub input: InputSchedule,
    pub rollout: RolloutConfig,
    /// Replace `(x_f, z)` of the initial state by the quasi-steady solve at `x_s0`.
    #[serde(default)]
    pub project: bool,
    #[serde(default = "default_true")]
    pub reference: bool,
    #[serde(default)]
    pub tolerance: ReferenceTolerance,
}

/// Seeded scenarios: slow initial states and constant inputs drawn from boxes,
/// with fast and algebraic states on the quasi-steady manifold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioPool {
    pub n: usize,
    pub seed: u64,
    pub slow_ranges: Vec<[f64; 2]>,
    #[serde(default)]
    pub input_ranges: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConformalFile {
    pub system: SystemConfig,
    pub rollout: RolloutConfig,
    pub calibration_pool: ScenarioPool,
    pub test_pool: ScenarioPool,
    #[serde(default)]
    pub ood_pool: Option<ScenarioPool>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Fraction of the calibration pool used to estimate the amplification.
    #[serde(default = "default_split")]
    pub amplification_split: f64,
    #[serde(default)]
    pub tolerance: ReferenceTolerance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionVariant {
    pub slow: Vec<usize>,
    pub fast: Vec<usize>,
    /// Sampler ranges for the new slow set.
    pub slow_ranges: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Window lengths for the linear clock.
    #[serde(default)]
    pub window_lengths: Vec<f64>,
    #[serde(default)]
    pub partitions: Vec<PartitionVariant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSpec {
    pub pool: ScenarioPool,
    pub horizon: f64,
    #[serde(default)]
    pub t0: f64,
    #[serde(default = "default_points")]
    pub points_per_window: usize,
    #[serde(default)]
    pub tolerance: ReferenceTolerance,
}

fn default_points() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateFile {
    pub system: SystemConfig,
    pub net: NetSpec,
    pub train: TrainConfig,
    pub evaluation: EvaluationSpec,
    pub sweep: SweepSpec,
}

fn default_rhos() -> Vec<f64> {
    vec![0.4, 3.0]
}

fn default_eta() -> f64 {
    0.25
}

fn default_components() -> usize {
    3
}

fn default_coupling() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeDemoConfig {
    /// Constructed contraction ratios for the two-scalar affine pair.
    #[serde(default = "default_rhos")]
    pub rhos: Vec<f64>,
    /// Damping used when the undamped iteration fails.
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Components of the coupled synthetic network.
    #[serde(default = "default_components")]
    pub n_components: usize,
    #[serde(default = "default_coupling")]
    pub coupling: f64,
}

impl Default for CascadeDemoConfig {
    fn default() -> Self {
        Self { rhos: default_rhos(), eta: default_eta(), n_components: default_components(), coupling: default_coupling() }
    }
}

/// Parses a JSON config, reporting syntax and schema errors with line and column.
pub fn parse_config<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T, CliError> {
    serde_json::from_str(text)
        .map_err(|e| CliError::Config(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column())))
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<(T, ConfigStamp), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let value = parse_config(path, &text)?;
    let stamp = ConfigStamp { path: path.to_path_buf(), sha256: hex_digest(text.as_bytes()) };
    Ok((value, stamp))
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Manifest and output plumbing

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigStamp {
    pub path: PathBuf,
    pub sha256: String,
}

/// Written next to every run's outputs as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub configs: Vec<ConfigStamp>,
    pub seed: Option<u64>,
    pub version: String,
    pub threads: usize,
    pub output_dir: PathBuf,
    pub outputs: Vec<String>,
    pub wall_seconds: f64,
    pub exit_code: u8,
    pub error: Option<String>,
}

struct Run {
    out: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn write(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let path = self.out.join(name);
        std::fs::write(&path, text).map_err(|source| CliError::Io { path, source })?;
        self.manifest.outputs.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Numeric(e.to_string()))?;
        self.write(name, &text)
    }

    fn stamp(&mut self, stamp: ConfigStamp) {
        self.manifest.configs.push(stamp);
    }
}

fn output_dir(cli: &Cli) -> PathBuf {
    if let Some(out) = &cli.out {
        return out.clone();
    }
    let root = std::env::var_os("DAENET_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("daenet-out"));
    root.join(cli.command.name())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli, args.iter().map(|a| a.to_string_lossy().into_owned()).collect()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("daenet: {e}");
            e.exit_code()
        }
    }
}

/// Runs one parsed command. The manifest is written on success and failure.
pub fn run(cli: &Cli, args: Vec<String>) -> Result<(), CliError> {
    if cli.threads > 0 {
        // A global pool can only be installed once per process; later calls keep the first.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    let out = output_dir(cli);
    std::fs::create_dir_all(&out).map_err(|source| CliError::Io { path: out.clone(), source })?;
    let mut run = Run {
        out: out.clone(),
        manifest: RunManifest {
            command: cli.command.name().to_string(),
            args,
            configs: Vec::new(),
            seed: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
            threads: rayon::current_num_threads(),
            output_dir: out,
            outputs: Vec::new(),
            wall_seconds: 0.0,
            exit_code: 0,
            error: None,
        },
    };
    let start = Instant::now();
    let result = match &cli.command {
        Command::Reference(a) => cmd_reference(&mut run, a),
        Command::Train(a) => cmd_train(&mut run, a),
        Command::Rollout(a) => cmd_rollout(&mut run, a),
        Command::Calibrate(a) => cmd_calibrate(&mut run, a),
        Command::Coverage(a) => cmd_coverage(&mut run, a),
        Command::Ablate(a) => cmd_ablate(&mut run, a),
        Command::CascadeDemo(a) => cmd_cascade_demo(&mut run, a),
    };
    run.manifest.wall_seconds = start.elapsed().as_secs_f64();
    if let Err(e) = &result {
        run.manifest.exit_code = e.exit_code();
        run.manifest.error = Some(e.to_string());
    }
    let manifest = run.manifest.clone();
    let path = run.out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|source| CliError::Io { path, source })?;
    result
}

// ---------------------------------------------------------------------------
// Shared experiment helpers

fn check_len(what: &str, v: &[f64], n: usize) -> Result<(), CliError> {
    if v.len() == n {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} has length {}, expected {n}", v.len())))
    }
}

/// Consistent `(x, z)` with the given slow state: fast and algebraic parts from
/// the quasi-steady solve.
pub fn quasi_steady_state(sys: &DaeSystem, x_s: &[f64], u: &[f64], guess: Option<&[f64]>) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let fallback = {
        let (x, z, _) = sys.model().sample_point();
        sys.y_part(&x, &z)
    };
    let res = newton::solve_extended(sys, x_s, u, Some(guess.unwrap_or(&fallback)), &NewtonConfig::default())
        .map_err(|e| CliError::Numeric(e.to_string()))?;
    if !res.converged {
        return Err(CliError::Numeric(format!("quasi-steady solve did not converge at x_s = {x_s:?}")));
    }
    Ok(sys.assemble(x_s, &res.y_star))
}

/// One pool scenario: consistent initial state and a constant input.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub x0: Vec<f64>,
    pub z0: Vec<f64>,
    pub u: Vec<f64>,
}

/// Draws the pool's scenarios; draws whose quasi-steady solve fails are redrawn.
pub fn sample_scenarios(sys: &DaeSystem, pool: &ScenarioPool) -> Result<Vec<Scenario>, CliError> {
    if pool.slow_ranges.len() != sys.n_s() || pool.input_ranges.len() != sys.n_u() {
        return Err(CliError::Config(format!(
            "scenario pool needs {} slow ranges and {} input ranges",
            sys.n_s(),
            sys.n_u()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(pool.seed);
    let draw = |r: [f64; 2], rng: &mut ChaCha8Rng| if r[1] > r[0] { rng.gen_range(r[0]..r[1]) } else { r[0] };
    let mut out = Vec::with_capacity(pool.n);
    let mut failures = 0;
    while out.len() < pool.n {
        let x_s: Vec<f64> = pool.slow_ranges.iter().map(|&r| draw(r, &mut rng)).collect();
        let u: Vec<f64> = pool.input_ranges.iter().map(|&r| draw(r, &mut rng)).collect();
        match quasi_steady_state(sys, &x_s, &u, None) {
            Ok((x0, z0)) => out.push(Scenario { x0, z0, u }),
            Err(e) => {
                failures += 1;
                if failures > 10 * pool.n.max(10) {
                    return Err(e);
                }
            }
        }
    }
    Ok(out)
}

/// Reference trajectory at exactly the given times (the first is the start).
pub fn reference_at(
    sys: &DaeSystem,
    x0: &[f64],
    z0: &[f64],
    input: &InputSchedule,
    times: &[f64],
    tol: ReferenceTolerance,
) -> Result<Trajectory, CliError> {
    let (&t0, rest) = times.split_first().ok_or_else(|| CliError::Config("empty time grid".into()))?;
    let t1 = rest.last().copied().unwrap_or(t0);
    if t1 <= t0 {
        return Err(CliError::Config("reference needs at least one time after the start".into()));
    }
    let cfg = IntegratorConfig::adaptive(t0, t1, rest.to_vec()).with_tolerances(tol.rtol, tol.atol);
    let mut traj = integrate::integrate(sys, x0, z0, input, &cfg)?;
    // Landing points make the stored times equal the requested ones up to rounding.
    traj.times = times.to_vec();
    Ok(traj)
}

/// Rollout and reference for every scenario, in pool order.
pub fn run_pool(
    net: &OperatorNet,
    sys: &DaeSystem,
    rollout_cfg: &RolloutConfig,
    scenarios: &[Scenario],
    tol: ReferenceTolerance,
) -> Result<Vec<(Trajectory, Trajectory)>, CliError> {
    scenarios
        .par_iter()
        .map(|s| {
            let input = InputSchedule::constant(s.u.clone());
            let pred = train::rollout(net, sys, &s.x0, &s.z0, &input, rollout_cfg)?.trajectory;
            let reference = reference_at(sys, &s.x0, &s.z0, &input, &pred.times, tol)?;
            Ok((pred, reference))
        })
        .collect()
}

/// Column groups of the concatenated state `[x; z]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateGroups {
    pub slow: Vec<usize>,
    pub fast: Vec<usize>,
    pub algebraic: Vec<usize>,
}

impl StateGroups {
    pub fn of(sys: &DaeSystem) -> Self {
        let p = sys.partition();
        Self { slow: p.slow.clone(), fast: p.fast.clone(), algebraic: (0..sys.n_z()).map(|j| sys.n_x() + j).collect() }
    }

    /// Fast and algebraic columns together.
    pub fn solved(&self) -> Vec<usize> {
        self.fast.iter().chain(&self.algebraic).copied().collect()
    }
}

/// Names of columns of `[x; z]`.
pub fn column_names(sys: &DaeSystem, columns: &[usize]) -> Vec<String> {
    let names: Vec<String> = sys.model().state_names().into_iter().chain(sys.model().algebraic_names()).collect();
    columns.iter().map(|&c| names.get(c).cloned().unwrap_or_else(|| format!("c{c}"))).collect()
}

fn value(t: &Trajectory, k: usize, c: usize) -> f64 {
    let nx = t.x[k].len();
    if c < nx {
        t.x[k][c]
    } else {
        t.z[k][c - nx]
    }
}

/// Relative L2 error of each column, `‖pred − ref‖₂ / ‖ref‖₂` over all points.
pub fn relative_l2(pred: &Trajectory, reference: &Trajectory, columns: &[usize]) -> Vec<f64> {
    columns
        .iter()
        .map(|&c| {
            let (mut num, mut den) = (0.0, 0.0);
            for k in 0..pred.len().min(reference.len()) {
                let r = value(reference, k, c);
                num += (value(pred, k, c) - r).powi(2);
                den += r * r;
            }
            (num / den.max(f64::MIN_POSITIVE)).sqrt()
        })
        .collect()
}

/// Pooled relative L2 error of a column group across many trajectory pairs.
pub fn pooled_relative_l2(pairs: &[(Trajectory, Trajectory)], columns: &[usize]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (p, r) in pairs {
        for k in 0..p.len().min(r.len()) {
            for &c in columns {
                let rv = value(r, k, c);
                num += (value(p, k, c) - rv).powi(2);
                den += rv * rv;
            }
        }
    }
    if columns.is_empty() {
        0.0
    } else {
        (num / den.max(f64::MIN_POSITIVE)).sqrt()
    }
}

/// Builds a network for `sys` and trains it.
pub fn train_network(sys: &DaeSystem, spec: &NetSpec, cfg: &TrainConfig) -> Result<(OperatorNet, train::TrainOutcome), CliError> {
    let nc = train::net_config_for(sys, cfg, spec.n_basis, spec.hidden_width, spec.depth, spec.seed)
        .with_activation(spec.activation)
        .with_precision(spec.precision);
    let mut net = OperatorNet::new(nc)?;
    let outcome = train::train(&mut net, sys, cfg)?;
    Ok((net, outcome))
}

// ---------------------------------------------------------------------------
// Commands

fn cmd_reference(run: &mut Run, a: &ReferenceArgs) -> Result<(), CliError> {
    let (cfg, stamp): (ReferenceConfig, _) = read_config(&a.config)?;
    run.stamp(stamp);
    let sys = cfg.system.build()?;
    cfg.input.validate()?;
    check_len("x0", &cfg.x0, sys.n_x())?;
    check_len("z0", &cfg.z0, sys.n_z())?;
    check_len("input", cfg.input.value_at(cfg.integrator.t_span.0), sys.n_u())?;
    let (x0, z0) = match a.project {
        None => (cfg.x0.clone(), cfg.z0.clone()),
        Some(p) => {
            let mode = match p {
                ProjectArg::Algebraic => Projection::Algebraic,
                ProjectArg::QuasiSteady => Projection::QuasiSteady,
            };
            let u = cfg.input.value_at(cfg.integrator.t_span.0);
            integrate::project_consistent(&sys, &cfg.x0, &cfg.z0, u, mode)?
        }
    };
    let traj = integrate::integrate(&sys, &x0, &z0, &cfg.input, &cfg.integrator)?;
    run.write("reference.csv", &traj.to_csv())?;
    run.write_json("reference.json", &traj)?;
    #[derive(Serialize)]
    struct Summary {
        system: String,
        n_points: usize,
        t_start: f64,
        t_end: f64,
        max_constraint_residual: f64,
    }
    run.write_json(
        "summary.json",
        &Summary {
            system: sys.name().to_string(),
            n_points: traj.len(),
            t_start: traj.times[0],
            t_end: *traj.times.last().unwrap(),
            max_constraint_residual: traj.max_constraint_residual(&sys),
        },
    )
}

/// The ODE twin of a Robertson training config: `(y1, y3)` slow, `y2` fast.
fn ode_formulation(file: &TrainFile) -> Result<(SystemConfig, WindowSampler), CliError> {
    if file.system.system != "robertson" {
        return Err(CliError::Config("--ode-formulation applies to the robertson system only".into()));
    }
    let mut sys = file.system.clone();
    sys.system = "robertson_ode".into();
    sys.partition_override = None;
    let sampler = match &file.ode_sampler {
        Some(s) => s.clone(),
        None => {
            let mut s = file.train.sampler.clone();
            let y1 = s.slow_ranges.first().copied().unwrap_or([0.0, 1.0]);
            s.slow_ranges = vec![y1, [0.0, (1.0 - y1[0]).max(0.0)]];
            s
        }
    };
    Ok((sys, sampler))
}

fn cmd_train(run: &mut Run, a: &TrainArgs) -> Result<(), CliError> {
    let (mut file, stamp): (TrainFile, _) = read_config(&a.config)?;
    run.stamp(stamp);
    if let Some(m) = a.mode {
        file.train.mode = m.into();
    }
    if let Some(seed) = a.seed {
        file.train.seed = seed;
        file.net.seed = seed;
    }
    if let Some(e) = a.epochs {
        file.train.epochs = e;
    }
    if a.ode_formulation {
        let (sys_cfg, sampler) = ode_formulation(&file)?;
        file.system = sys_cfg;
        file.train.sampler = sampler;
    }
    run.manifest.seed = Some(file.train.seed);
    let sys = file.system.build()?;
    let cfg = &file.train;
    let nc = train::net_config_for(&sys, cfg, file.net.n_basis, file.net.hidden_width, file.net.depth, file.net.seed)
        .with_activation(file.net.activation)
        .with_precision(file.net.precision);
    let mut net = OperatorNet::new(nc)?;
    let every = file.checkpoint_every;
    let mut snapshots = Vec::new();
    let outcome = train::train_with_observer(&mut net, &sys, cfg, &mut |r, net| {
        if every > 0 && (r.epoch + 1) % every == 0 && r.epoch + 1 < cfg.epochs {
            snapshots.push((r.epoch + 1, net.to_checkpoint()));
        }
    })?;
    for (epoch, ck) in &snapshots {
        run.write_json(&format!("checkpoint_{epoch:06}.json"), ck)?;
    }
    run.write_json("checkpoint.json", &net.to_checkpoint())?;
    run.write("loss.csv", &outcome.to_csv(cfg.mode))?;
    #[derive(Serialize)]
    struct Summary {
        system: String,
        mode: LossMode,
        epochs: usize,
        n_params: usize,
        final_loss: f64,
        final_smoothed_loss: f64,
        max_newton_failure_fraction: f64,
        final_lambdas: Vec<f64>,
    }
    let smoothed = outcome.smoothed_loss(100);
    run.write_json(
        "train_summary.json",
        &Summary {
            system: sys.name().to_string(),
            mode: cfg.mode,
            epochs: cfg.epochs,
            n_params: net.n_params(),
            final_loss: outcome.final_loss(),
            final_smoothed_loss: smoothed.last().copied().unwrap_or(f64::NAN),
            max_newton_failure_fraction: outcome.history.iter().map(|r| r.newton_failure_fraction).fold(0.0, f64::max),
            final_lambdas: outcome.final_lambdas.clone(),
        },
    )
}

/// Per-rollout error table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub system: String,
    pub n_params: usize,
    pub states: Vec<String>,
    pub relative_l2: Vec<f64>,
    pub max_constraint_residual: f64,
    /// `max |y1 + y2 + y3 − 1|` for the Robertson formulations.
    pub max_mass_balance_drift: Option<f64>,
    pub flagged_windows: Vec<usize>,
    pub flagged_fraction: f64,
    pub max_newton_iterations: usize,
}

impl RolloutReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("state,relative_l2\n");
        for (s, e) in self.states.iter().zip(&self.relative_l2) {
            out.push_str(&format!("{s},{e:.16e}\n"));
        }
        out
    }
}

fn cmd_rollout(run: &mut Run, a: &RolloutArgs) -> Result<(), CliError> {
    let (file, stamp): (RolloutFile, _) = read_config(&a.config)?;
    run.stamp(stamp);
    let net = OperatorNet::load(&a.checkpoint)?;
    run.stamp(ConfigStamp {
        path: a.checkpoint.clone(),
        sha256: hex_digest(&std::fs::read(&a.checkpoint).map_err(|source| CliError::Io { path: a.checkpoint.clone(), source })?),
    });
    let sys = file.system.build()?;
    file.input.validate()?;
    check_len("x0", &file.x0, sys.n_x())?;
    let u0 = file.input.value_at(file.rollout.t0).to_vec();
    check_len("input", &u0, sys.n_u())?;
    let (x0, z0) = if file.project {
        let x_s = sys.slow_part(&file.x0);
        quasi_steady_state(&sys, &x_s, &u0, None)?
    } else {
        check_len("z0", &file.z0, sys.n_z())?;
        (file.x0.clone(), file.z0.clone())
    };
    let res = train::rollout(&net, &sys, &x0, &z0, &file.input, &file.rollout)?;
    let traj = &res.trajectory;
    run.write("rollout.csv", &traj.to_csv())?;
    run.write_json("rollout.json", &res)?;

    let all: Vec<usize> = (0..sys.n_x() + sys.n_z()).collect();
    let relative_l2 = if file.reference {
        let reference = reference_at(&sys, &x0, &z0, &file.input, &traj.times, file.tolerance)?;
        run.write("reference.csv", &reference.to_csv())?;
        relative_l2(traj, &reference, &all)
    } else {
        Vec::new()
    };
    let drift = sys.name().starts_with("robertson").then(|| {
        traj.x.iter().zip(&traj.z).map(|(x, z)| train::robertson_mass_balance(x, z).abs()).fold(0.0, f64::max)
    });
    let report = RolloutReport {
        system: sys.name().to_string(),
        n_params: net.n_params(),
        states: column_names(&sys, &all),
        relative_l2,
        max_constraint_residual: traj.max_constraint_residual(&sys),
        max_mass_balance_drift: drift,
        flagged_windows: res.flagged_windows.clone(),
        flagged_fraction: res.flagged_fraction(),
        max_newton_iterations: res.newton_iterations.iter().copied().max().unwrap_or(0),
    };
    run.write_json("errors.json", &report)?;
    run.write("errors.csv", &report.to_csv())?;
    if report.flagged_fraction > 0.5 {
        return Err(CliError::Quality(format!(
            "{} of {} windows flagged by failed Newton solves",
            report.flagged_windows.len(),
            res.states.len()
        )));
    }
    Ok(())
}

/// Calibration output: slow-state bands plus the estimated amplification
/// for the solver-computed states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub slow_columns: Vec<usize>,
    pub solved_columns: Vec<usize>,
    pub calibration: ConformalCalibration,
    pub amplification: f64,
    pub solved_states: Vec<String>,
}

/// Calibrates on a pool: direct bands for the slow states, amplification from
/// the first `split` fraction of the calibration trajectories.
pub fn calibrate_pool(sys: &DaeSystem, pairs: &[(Trajectory, Trajectory)], alpha: f64, split: f64) -> Result<CalibrationArtifact, CliError> {
    let groups = StateGroups::of(sys);
    let solved = groups.solved();
    let (preds, refs): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
    let slow_rows = conformal::trajectory_scores(&preds, &refs, &groups.slow)?;
    let solved_rows = conformal::trajectory_scores(&preds, &refs, &solved)?;
    let calibration = ConformalCalibration::from_scores(column_names(sys, &groups.slow), &slow_rows, alpha)?;
    let n_split = ((pairs.len() as f64 * split).round() as usize).clamp(1, pairs.len());
    let amplification = if solved.is_empty() {
        1.0
    } else {
        conformal::estimate_amplification(&slow_rows[..n_split], &solved_rows[..n_split])
    };
    Ok(CalibrationArtifact {
        slow_columns: groups.slow.clone(),
        solved_columns: solved.clone(),
        calibration,
        amplification,
        solved_states: column_names(sys, &solved),
    })
}

/// Direct slow-state coverage and induced coverage of the solved states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageOutput {
    pub pool: String,
    pub direct: CoverageReport,
    pub induced_bands: InducedBands,
    pub induced: CoverageReport,
}

pub fn coverage_pool(art: &CalibrationArtifact, pairs: &[(Trajectory, Trajectory)], pool: &str) -> Result<CoverageOutput, CliError> {
    let (preds, refs): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
    let direct = conformal::evaluate_coverage(&art.calibration, &preds, &refs, &art.slow_columns)?;
    let bands = conformal::induced_fast_bands(&art.calibration, art.amplification, art.solved_states.clone());
    let solved_rows = conformal::trajectory_scores(&preds, &refs, &art.solved_columns)?;
    let induced = bands.coverage(&solved_rows);
    Ok(CoverageOutput { pool: pool.to_string(), direct, induced_bands: bands, induced })
}

fn load_checkpoint(run: &mut Run, path: &Path) -> Result<OperatorNet, CliError> {
    let net = OperatorNet::load(path)?;
    let bytes = std::fs::read(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    run.stamp(ConfigStamp { path: path.to_path_buf(), sha256: hex_digest(&bytes) });
    Ok(net)
}

fn cmd_calibrate(run: &mut Run, a: &CalibrateArgs) -> Result<(), CliError> {
    let (file, stamp): (ConformalFile, _) = read_config(&a.config)?;
    run.stamp(stamp);
    let net = load_checkpoint(run, &a.checkpoint)?;
    let sys = file.system.build()?;
    let alpha = a.alpha.unwrap_or(file.alpha);
    run.manifest.seed = Some(file.calibration_pool.seed);
    let scenarios = sample_scenarios(&sys, &file.calibration_pool)?;
    let pairs = run_pool(&net, &sys, &file.rollout, &scenarios, file.tolerance)?;
    let art = calibrate_pool(&sys, &pairs, alpha, file.amplification_split)?;
    art.calibration.ensure_finite()?;
    run.write_json("calibration.json", &art)
}

fn cmd_coverage(run: &mut Run, a: &CoverageArgs) -> Result<(), CliError> {
    let (file, stamp): (ConformalFile, _) = read_config(&a.config)?;
    run.stamp(stamp);
    let (art, stamp): (CalibrationArtifact, _) = read_config(&a.calibration)?;
    run.stamp(stamp);
    let net = load_checkpoint(run, &a.checkpoint)?;
    let sys = file.system.build()?;
    let (pool, name) = if a.ood_pool {
        (file.ood_pool.as_ref().ok_or_else(|| CliError::Config("--ood-pool needs an ood_pool section".into()))?, "ood")
    } else {
        (&file.test_pool, "test")
    };
    run.manifest.seed = Some(pool.seed);
    let scenarios = sample_scenarios(&sys, pool)?;
    let pairs = run_pool(&net, &sys, &file.rollout, &scenarios, file.tolerance)?;
    let out = coverage_pool(&art, &pairs, name)?;
    run.write_json("coverage.json", &out)?;
    run.write("coverage.csv", &out.direct.to_csv())?;
    run.write("induced_coverage.csv", &out.induced.to_csv())?;
    if out.direct.ood && !a.ood_pool {
        return Err(CliError::Quality(format!(
            "average coverage {:.3} on the in-distribution pool is below {}",
            out.direct.average,
            conformal::OOD_THRESHOLD
        )));
    }
    Ok(())
}

/// One ablation variant's errors on the evaluation pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub window_length: Option<f64>,
    pub slow_error: f64,
    pub fast_error: f64,
    pub algebraic_error: f64,
    pub final_loss: f64,
}

/// Trains and evaluates one variant. Errors are measured on the groups of
/// `base_groups`, i.e. on the physical slow/fast/algebraic states of the
/// unmodified partition.
pub fn evaluate_variant(
    sys: &DaeSystem,
    base_groups: &StateGroups,
    spec: &NetSpec,
    cfg: &TrainConfig,
    eval: &EvaluationSpec,
    scenarios: &[Scenario],
) -> Result<(f64, f64, f64, f64), CliError> {
    let (net, outcome) = train_network(sys, spec, cfg)?;
    let t_w = match cfg.clock {
        WindowClock::Linear { t_w } => t_w,
        WindowClock::Log10 { .. } => return Err(CliError::Config("ablations use the linear window clock".into())),
    };
    let n_windows = ((eval.horizon / t_w).round() as usize).max(1);
    let rollout_cfg = RolloutConfig {
        mode: cfg.mode,
        clock: cfg.clock,
        t0: eval.t0,
        n_windows,
        points_per_window: eval.points_per_window,
        newton: cfg.newton.clone(),
    };
    let pairs = run_pool(&net, sys, &rollout_cfg, scenarios, eval.tolerance)?;
    Ok((
        pooled_relative_l2(&pairs, &base_groups.slow),
        pooled_relative_l2(&pairs, &base_groups.fast),
        pooled_relative_l2(&pairs, &base_groups.algebraic),
        outcome.final_loss(),
    ))
}

/// Runs the whole sweep; one row per variant, base configuration first.
pub fn run_ablation(file: &AblateFile) -> Result<Vec<AblationRow>, CliError> {
    if file.sweep.window_lengths.is_empty() && file.sweep.partitions.is_empty() {
        return Err(CliError::Config("sweep lists no window lengths and no partitions".into()));
    }
    let sys = file.system.build()?;
    let groups = StateGroups::of(&sys);
    let scenarios = sample_scenarios(&sys, &file.evaluation.pool)?;
    let mut rows = Vec::new();
    let base_tw = match file.train.clock {
        WindowClock::Linear { t_w } => t_w,
        WindowClock::Log10 { .. } => return Err(CliError::Config("ablations use the linear window clock".into())),
    };
    let mut push = |variant: String, t_w: Option<f64>, r: (f64, f64, f64, f64)| {
        rows.push(AblationRow { variant, window_length: t_w, slow_error: r.0, fast_error: r.1, algebraic_error: r.2, final_loss: r.3 });
    };
    if !file.sweep.partitions.is_empty() && !file.sweep.window_lengths.contains(&base_tw) {
        push("base".into(), Some(base_tw), evaluate_variant(&sys, &groups, &file.net, &file.train, &file.evaluation, &scenarios)?);
    }
    for &t_w in &file.sweep.window_lengths {
        if !(t_w > 0.0 && t_w.is_finite()) {
            return Err(CliError::Config(format!("window length {t_w} must be positive")));
        }
        let mut cfg = file.train.clone();
        cfg.clock = WindowClock::Linear { t_w };
        push(format!("window_{t_w}"), Some(t_w), evaluate_variant(&sys, &groups, &file.net, &cfg, &file.evaluation, &scenarios)?);
    }
    for (i, p) in file.sweep.partitions.iter().enumerate() {
        let variant_sys = sys.repartition(p.slow.clone(), p.fast.clone())?;
        let mut cfg = file.train.clone();
        cfg.sampler.slow_ranges = p.slow_ranges.clone();
        let mut scenarios_v = Vec::with_capacity(scenarios.len());
        for s in &scenarios {
            // Same physical initial states, re-solved for the variant's fast set.
            let x_s = variant_sys.slow_part(&s.x0);
            let guess = variant_sys.y_part(&s.x0, &s.z0);
            let (x0, z0) = quasi_steady_state(&variant_sys, &x_s, &s.u, Some(&guess))?;
            scenarios_v.push(Scenario { x0, z0, u: s.u.clone() });
        }
        let r = evaluate_variant(&variant_sys, &groups, &file.net, &cfg, &file.evaluation, &scenarios_v)?;
        push(format!("partition_{i}"), Some(base_tw), r);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,window_length,slow_error,fast_error,algebraic_error,final_loss\n");
    for r in rows {
        let tw = r.window_length.map(|v| format!("{v:.16e}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{tw},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            r.variant, r.slow_error, r.fast_error, r.algebraic_error, r.final_loss
        ));
    }
    out
}

fn cmd_ablate(run: &mut Run, a: &AblateArgs) -> Result<(), CliError> {
    let (file, stamp): (AblateFile, _) = read_config(&a.config)?;
    run.stamp(stamp);
    run.manifest.seed = Some(file.train.seed);
    let rows = run_ablation(&file)?;
    run.write("ablation.csv", &ablation_csv(&rows))?;
    run.write_json("ablation.json", &rows)
}

/// Outcome of one cascaded solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeRun {
    pub converged: bool,
    pub outer_iterations: usize,
    pub residual_history: Vec<f64>,
    pub estimated_rho: f64,
    pub eta: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeCase {
    pub name: String,
    pub constructed_rho: Option<f64>,
    pub undamped: CascadeRun,
    pub damped: Option<CascadeRun>,
    /// `max |cascade_vjp − monolithic_vjp|` at the converged point.
    pub vjp_max_difference: Option<f64>,
    /// `max |v*_cascade − v*_monolithic|`.
    pub monolithic_v_difference: Option<f64>,
}

fn cascade_run(cs: &cascade::CoupledSystem, x_s: &[Vec<f64>], v0: &[f64], eta: f64) -> (CascadeRun, Option<cascade::CascadeResult>) {
    let cfg = CascadeConfig { eta, fallback: Fallback::None, ..Default::default() };
    match cascade::cascade_solve(cs, x_s, v0, &cfg) {
        Ok(r) => (
            CascadeRun {
                converged: true,
                outer_iterations: r.outer_iterations,
                residual_history: r.residual_history.clone(),
                estimated_rho: r.estimated_rho,
                eta,
                error: None,
            },
            Some(r),
        ),
        Err(e) => (
            CascadeRun { converged: false, outer_iterations: 0, residual_history: Vec::new(), estimated_rho: f64::NAN, eta, error: Some(e.to_string()) },
            None,
        ),
    }
}

fn cascade_case(name: String, rho: Option<f64>, cs: &cascade::CoupledSystem, x_s: &[Vec<f64>], v0: &[f64], eta: f64) -> Result<CascadeCase, CliError> {
    let (undamped, res) = cascade_run(cs, x_s, v0, 1.0);
    let (damped, res) = match res {
        Some(r) => (None, Some(r)),
        None => {
            let (d, r) = cascade_run(cs, x_s, v0, eta);
            (Some(d), r)
        }
    };
    let (mut vjp, mut vdiff) = (None, None);
    if let Some(r) = &res {
        let cot_y: Vec<Vec<f64>> = r.locals.iter().map(|l| l.y_star.iter().map(|_| 1.0).collect()).collect();
        let cot_v = vec![1.0; cs.n_v()];
        let a = cascade::cascade_vjp(cs, r, &cot_y, &cot_v)?;
        let b = cascade::monolithic_vjp(cs, r, &cot_y, &cot_v)?;
        vjp = Some(a.iter().flatten().zip(b.iter().flatten()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max));
        let mono = cascade::monolithic_solve(cs, x_s, v0, &NewtonConfig::default())?;
        vdiff = Some(r.v_star.iter().zip(&mono.v_star).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max));
    }
    Ok(CascadeCase { name, constructed_rho: rho, undamped, damped, vjp_max_difference: vjp, monolithic_v_difference: vdiff })
}

fn cmd_cascade_demo(run: &mut Run, a: &CascadeDemoArgs) -> Result<(), CliError> {
    let cfg = match &a.config {
        Some(path) => {
            let (c, stamp): (CascadeDemoConfig, _) = read_config(path)?;
            run.stamp(stamp);
            c
        }
        None => CascadeDemoConfig::default(),
    };
    if !(cfg.eta > 0.0 && cfg.eta <= 1.0) {
        return Err(CliError::Config(format!("eta must lie in (0, 1], got {}", cfg.eta)));
    }
    let mut cases = Vec::new();
    for &rho in &cfg.rhos {
        let cs = cascade::two_scalar_affine(0.5, 0.5, rho, 1.0);
        cases.push(cascade_case(format!("affine_rho_{rho}"), Some(rho), &cs, &[vec![0.1], vec![-0.2]], &[0.0], cfg.eta)?);
    }
    if cfg.n_components > 0 {
        let cs = cascade::coupled_synthetic(cfg.n_components, cfg.coupling)?;
        let x_s: Vec<Vec<f64>> = cs.components.iter().map(|c| vec![0.1; c.n_s()]).collect();
        let v0 = vec![0.0; cs.n_v()];
        cases.push(cascade_case(format!("synthetic_{}", cfg.n_components), None, &cs, &x_s, &v0, cfg.eta)?);
    }
    run.write_json("cascade.json", &cases)?;
    let mut csv = String::from("case,converged_undamped,outer_iterations,estimated_rho,damped_converged,damped_iterations\n");
    for c in &cases {
        csv.push_str(&format!(
            "{},{},{},{:.16e},{},{}\n",
            c.name,
            c.undamped.converged,
            c.undamped.outer_iterations,
            c.undamped.estimated_rho,
            c.damped.as_ref().map_or(String::new(), |d| d.converged.to_string()),
            c.damped.as_ref().map_or(String::new(), |d| d.outer_iterations.to_string()),
        ));
    }
    run.write("cascade.csv", &csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_json_reports_line_and_column() {
        let err = parse_config::<ReferenceConfig>(Path::new("r.json"), "{\n  \"system\": ,\n}").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("r.json:2:"), "{err}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = r#"{"rhos": [0.4], "bogus": 1}"#;
        assert!(parse_config::<CascadeDemoConfig>(Path::new("c.json"), text).is_err());
    }

    #[test]
    fn empty_sweep_is_a_config_error() {
        let sys = crate::dae::make_linear_probe();
        let sampler = WindowSampler { slow_ranges: vec![[-1.0, 1.0]], input_ranges: vec![], start_range: [0.0, 0.0], max_tau_rate: None, max_tau_stiffness: None, edge_fraction: 0.0, edge_min: 1e-3 };
        let file = AblateFile {
            system: SystemConfig::named("linear"),
            net: NetSpec { n_basis: 4, hidden_width: 8, depth: 1, activation: Activation::Tanh, precision: Precision::F64, seed: 0 },
            train: TrainConfig::new(1, sampler, WindowClock::Linear { t_w: 1.0 }, LossMode::ExtendedNewton),
            evaluation: EvaluationSpec {
                pool: ScenarioPool { n: 1, seed: 0, slow_ranges: vec![[0.0, 1.0]], input_ranges: vec![] },
                horizon: 1.0,
                t0: 0.0,
                points_per_window: 2,
                tolerance: ReferenceTolerance::default(),
            },
            sweep: SweepSpec { window_lengths: vec![], partitions: vec![] },
        };
        assert_eq!(sys.n_s(), 1);
        assert_eq!(run_ablation(&file).unwrap_err().exit_code(), 2);
    }
}
