//! Command-line front end.
//!
//! Every subcommand reads its options from flags and, optionally, a JSON
//! config file (`--config`); flags given on the command line win. The merged
//! options are echoed in a run manifest, which can itself be passed back as
//! `--config` to repeat the run.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::control::{plan_reach, verify_schedule, ReachResult, ReachSpec};
use crate::corrector::{alpha_sweep, CorrectorField, PsiParams, QuadratureConfig};
use crate::diagnostics::{drift_sweep, mean_flux_box, mean_flux_sphere, FluxBox, SamplerConfig, DEFAULT_QUAD_NODES};
use crate::dynamics::{
    integrate, invariance_residual, pushforward_test, CorrectedField, FlowConfig, PushforwardConfig, DEFAULT_STEP,
};
use crate::error::Error;
use crate::fields::{divergence_fd, eval_field, parse_point, Field, VectorField, DEFAULT_FD_STEP};
use crate::recurrence::{
    continuous_return_scan, near_return_search, poincare_discrete_check, poisson_stability_scan, Ball, FiniteMap,
    LatticeMap, LatticeSystem, LatticeWeight, PoissonConfig, ReturnScanConfig, Window,
};

const BUILTINS: [&str; 6] = ["zero", "shear_sin", "taylor_green", "circular", "identity", "constant:c1,c2[,c3]"];

/// Comma-separated list of reals, e.g. `1,0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Point(pub Vec<f64>);

fn point_arg(s: &str) -> std::result::Result<Point, String> {
    parse_point(s).map(Point).map_err(|e| e.to_string())
}

#[derive(Parser)]
#[command(name = "recurflow", version, about = "Recurrence correctors, flow diagnostics and small-control planning")]
struct Cli {
    /// JSON file of options (or a run manifest) for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps the worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for output files; without it the main result goes to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Lists built-in fields, or describes one.
    Fields(FieldsArgs),
    /// Suprema of box averages at growing scales (CSV).
    Drift(DriftArgs),
    /// Normalized fluxes through spheres and squares of growing size (CSV).
    Flux(FluxArgs),
    /// Evaluates the corrector field `W`.
    Corrector {
        #[command(subcommand)]
        cmd: CorrectorCmd,
    },
    /// Integrates one trajectory (CSV).
    Flow(FlowArgs),
    /// `div(psi (V + W))` on a grid against `grad psi . V`.
    Invariance(InvarianceArgs),
    /// Monte-Carlo check that `psi dx` is carried to itself.
    Pushforward(PushforwardArgs),
    /// Recurrence checks for discrete maps and flows.
    Recur {
        #[command(subcommand)]
        cmd: RecurCmd,
    },
    /// Plans and verifies small controls between two points.
    Control {
        #[command(subcommand)]
        cmd: ControlCmd,
    },
}

#[derive(Subcommand)]
enum CorrectorCmd {
    /// `W(x)` with its closed-form divergence and error estimate.
    Eval(CorrectorEvalArgs),
    /// Suprema of `|W|`, `|div W|`, `|dW|` over a grid for several alphas (CSV).
    Sweep(CorrectorSweepArgs),
}

#[derive(Subcommand)]
enum RecurCmd {
    /// Exact iteration of a finite permutation or a lattice map.
    Discrete(DiscreteArgs),
    /// Return statistics of particles started in a ball.
    Continuous(ContinuousArgs),
    /// Closest self-approach of orbits started on a grid.
    Poisson(PoissonArgs),
    /// Refined closest self-approach of one orbit.
    NearReturn(NearReturnArgs),
}

#[derive(Subcommand)]
enum ControlCmd {
    /// Plans a small control from x0 to y0.
    Plan(PlanArgs),
    /// Re-simulates a stored plan against the original field.
    Verify(VerifyArgs),
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct FieldArgs {
    /// Built-in name or path to a JSON field spec.
    #[arg(long)]
    field: Option<String>,
    #[arg(long, default_value_t = 2)]
    dim: usize,
}

/// Optional corrector: enabled by giving `alpha`.
#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct CorrArgs {
    /// Weight scale; adds the corrector W when given.
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight exponent; defaults to (2d-1)/4.
    #[arg(long)]
    p: Option<f64>,
    /// Half width of the window on which W is tabulated (d = 2).
    #[arg(long)]
    window: Option<f64>,
    /// Source lattice spacing for the tabulation.
    #[arg(long)]
    lattice_spacing: Option<f64>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct FieldsArgs {
    #[command(flatten)]
    #[serde(flatten)]
    f: FieldArgs,
    /// Also evaluate the field and its divergence here.
    #[arg(long, value_parser = point_arg, allow_hyphen_values = true)]
    x: Option<Point>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct DriftArgs {
    #[command(flatten)]
    #[serde(flatten)]
    f: FieldArgs,
    #[arg(long, value_parser = point_arg, allow_hyphen_values = true, default_value = "1,2,4,8,16")]
    scales: Point,
    #[arg(long, default_value_t = 10.0)]
    extent: f64,
    #[arg(long, default_value_t = 3)]
    lattice_per_axis: usize,
    #[arg(long, default_value_t = 4)]
    random: usize,
    #[arg(long, default_value_t = DEFAULT_QUAD_NODES)]
    quad_nodes: usize,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct FluxArgs {
    #[command(flatten)]
    #[serde(flatten)]
    f: FieldArgs,
    #[arg(long, value_parser = point_arg, allow_hyphen_values = true, default_value = "1,2,4,8,16")]
    radii: Point,
    /// Defaults to the origin.
    #[arg(long, value_parser = point_arg, allow_hyphen_values = true)]
    center: Option<Point>,
    #[arg(long, default_value_t = DEFAULT_QUAD_NODES)]
    quad_nodes: usize,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct CorrectorEvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    f: FieldArgs,
    #[arg(long, value_parser = point_arg, allow_hyphen_values = true)]
    x: Option<Point>,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long)]
    p: Option<f64>,
    /// Radius within which W must be valid; defaults to |x|.
    #[arg(long)]
    working_radius: Option<f64>,
    #[arg(long)]
    lattice_spacing: Option<f64>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct CorrectorSweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    f: FieldArgs,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long, value_parser = point_arg, allow_hyphen_values = true, default_value = "1,2,4,8,16")]
    alphas: Point,
    /// Grid on [-half, half]^d.
    #[arg(long, default_value_t = 5.0)]
    half: f64,
    /// Grid points per axis.
    #[arg(long, default_value_t = 11)]
    n: usize,
    #[arg(long, default_value_t = 1e-3)]
    fd_step: f64,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct FlowArgs {
    #[command(flatten)]
    #[serde(flatten)]
    f: FieldArgs,
    #[command(flatten)]
    #[serde(flatten)]
    c: CorrArgs,
    #[arg(long, value_parser = point_arg, allow_hyphen_values = true)]
    x: Option<Point>,
    /// Negative times integrate backward.
    #[arg(long, default_value_t = 10.0, allow_negative_numbers = true)]
    time: f64,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
    /// Keep every n-th step.
    #[arg(long, default_value_t = 1)]
    every: usize,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct InvarianceArgs {
    #[command(flatten)]
    #[serde(flatten)]
    f: FieldArgs,
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long, default_value_t = 5.0)]
    half: f64,
    #[arg(long, default_value_t = 21)]
    n: usize,
    #[arg(long, default_value_t = 1e-3)]
    fd_step: f64,
    /// Report `div(psi V)` alone.
    #[arg(long)]
    no_corrector: bool,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct PushforwardArgs {
    #[command(flatten)]
    #[serde(flatten)]
    f: FieldArgs,
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    window: Option<f64>,
    #[arg(long)]
    lattice_spacing: Option<f64>,
    #[arg(long, default_value_t = 5.0)]
    half_width: f64,
    #[arg(long, default_value_t = 100_000)]
    particles: usize,
    #[arg(long, default_value_t = 1.0)]
    time: f64,
    #[arg(long, default_value_t = 5)]
    bumps: usize,
    #[arg(long, default_value_t = 200)]
    bootstrap: usize,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
    /// Flow `V` alone (the weight is still `psi`).
    #[arg(long)]
    no_corrector: bool,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct DiscreteArgs {
    /// `cycle:N`, `random:N` (uses --seed) or `map:i0,i1,...`.
    #[arg(long)]
    perm: Option<String>,
    /// `translate:s1[,s2..]` or `rotate` on Z^d.
    #[arg(long)]
    lattice: Option<String>,
    /// `counting` or `psi:p,alpha` (lattice maps only).
    #[arg(long, default_value = "counting")]
    weight: String,
    /// States of U: `0,3,5` for permutations, `0,0;1,0` for lattice points.
    #[arg(long = "U", allow_negative_numbers = true)]
    u: Option<String>,
    #[arg(long, default_value_t = 100)]
    horizon: usize,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct ContinuousArgs {
    #[command(flatten)]
    #[serde(flatten)]
    f: FieldArgs,
    #[command(flatten)]
    #[serde(flatten)]
    c: CorrArgs,
    #[arg(long, value_parser = point_arg, allow_hyphen_values = true, default_value = "1.5707963267948966,0")]
    center: Point,
    #[arg(long, default_value_t = 0.5)]
    radius: f64,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = 1000.0)]
    horizon: f64,
    #[arg(long, default_value_t = 1000)]
    particles: usize,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    /// Draw starts from `psi dx` instead of Lebesgue measure (needs alpha).
    #[arg(long)]
    sample_mu: bool,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct PoissonArgs {
    #[command(flatten)]
    #[serde(flatten)]
    f: FieldArgs,
    #[command(flatten)]
    #[serde(flatten)]
    c: CorrArgs,
    #[arg(long, value_parser = point_arg, allow_hyphen_values = true)]
    lo: Option<Point>,
    #[arg(long, value_parser = point_arg, allow_hyphen_values = true)]
    hi: Option<Point>,
    #[arg(long, default_value_t = 5)]
    per_axis: usize,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = 100.0)]
    horizon: f64,
    #[arg(long, default_value_t = 0.05)]
    eps: f64,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct NearReturnArgs {
    #[command(flatten)]
    #[serde(flatten)]
    f: FieldArgs,
    #[command(flatten)]
    #[serde(flatten)]
    c: CorrArgs,
    #[arg(long, value_parser = point_arg, allow_hyphen_values = true)]
    x: Option<Point>,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = 100.0)]
    horizon: f64,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct PlanArgs {
    /// JSON plan spec (see README).
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct VerifyArgs {
    /// JSON written by `control plan`.
    #[arg(long)]
    result: Option<PathBuf>,
}

/// Field, corrector and planner settings read by `control plan`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlanSpec {
    pub field: String,
    #[serde(default = "two")]
    pub dim: usize,
    /// Corrector weight scale; no corrector when absent.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub p: Option<f64>,
    #[serde(default)]
    pub window: Option<f64>,
    #[serde(default)]
    pub lattice_spacing: Option<f64>,
    #[serde(flatten)]
    pub reach: ReachSpec,
}

fn two() -> usize {
    2
}

/// What `control plan` writes: enough to rebuild the field and re-check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlanOutput {
    pub spec: PlanSpec,
    pub result: ReachResult,
}

#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    argv: Vec<String>,
    config: Value,
    seed: u64,
    threads: Option<usize>,
    versions: Value,
    wall_time_s: f64,
    outputs: Vec<String>,
}

enum CliError {
    Usage(String),
    Domain(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Input(m) => CliError::Usage(m),
            e => CliError::Domain(e),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Usage(format!("bad option value: {e}"))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Input(_) => "input",
        Error::Config(_) => "config",
        Error::Integration { .. } => "integration",
        Error::Model(_) => "model",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
        Error::Csv(_) => "csv",
    }
}

fn report_error(kind: &str, message: &str) {
    let v = json!({ "error": { "kind": kind, "message": message } });
    let _ = writeln!(std::io::stderr(), "{v}");
}

/// Where results go: files under `--out`, or the main result on stdout.
struct Sink {
    dir: Option<PathBuf>,
    written: Vec<String>,
}

impl Sink {
    fn new(dir: Option<PathBuf>) -> CliResult<Self> {
        if let Some(d) = &dir {
            fs::create_dir_all(d).map_err(Error::from)?;
        }
        Ok(Self { dir, written: Vec::new() })
    }

    fn emit(&mut self, name: &str, text: &str, primary: bool) -> CliResult<()> {
        match &self.dir {
            Some(d) => {
                let path = d.join(name);
                fs::write(&path, text).map_err(Error::from)?;
                self.written.push(path.display().to_string());
            }
            None if primary => {
                let mut out = std::io::stdout().lock();
                out.write_all(text.as_bytes()).map_err(Error::from)?;
            }
            None => {}
        }
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T, primary: bool) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(v)?;
        text.push('\n');
        self.emit(name, &text, primary)
    }

    fn csv(&mut self, name: &str, header: &[String], rows: &[Vec<String>], primary: bool) -> CliResult<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).map_err(Error::from)?;
        for r in rows {
            w.write_record(r).map_err(Error::from)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        self.emit(name, &String::from_utf8_lossy(&bytes), primary)
    }
}

/// Shortest decimal that reads back as the same double.
fn num(v: f64) -> String {
    format!("{v:?}")
}

fn require<T>(v: Option<T>, flag: &str) -> CliResult<T> {
    v.ok_or_else(|| CliError::Usage(format!("missing --{flag}")))
}

fn load_field(f: &FieldArgs) -> CliResult<VectorField> {
    let name = require(f.field.as_deref(), "field")?;
    Ok(VectorField::from_name(name, f.dim)?)
}

fn psi_for(dim: usize, p: Option<f64>, alpha: f64) -> CliResult<PsiParams> {
    Ok(PsiParams::new(dim, p.unwrap_or_else(|| PsiParams::default_p(dim)), alpha)?)
}

fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `V`, or `V + W` with `W` tabulated (d = 2) or evaluated directly (d = 3).
fn build_corrected(v: VectorField, c: &CorrArgs, default_window: f64, id: &str) -> CliResult<CorrectedField> {
    let Some(alpha) = c.alpha else {
        return Ok(CorrectedField::uncorrected(v, id));
    };
    let psi = psi_for(v.dim(), c.p, alpha)?;
    if v.dim() == 2 {
        let half = c.window.unwrap_or(default_window);
        Ok(CorrectedField::tabulated(v, psi, half, c.lattice_spacing, id)?)
    } else {
        let radius = c.window.unwrap_or(default_window) * (v.dim() as f64).sqrt();
        let mut quad = QuadratureConfig::for_working_radius(v.dim(), radius);
        if let Some(h) = c.lattice_spacing {
            quad.lattice_spacing = h;
        }
        Ok(CorrectedField::with_direct(CorrectorField::new(v, psi, quad)?, id))
    }
}

/// Overrides defaulted options with config values; command-line flags win.
fn merge<T: Serialize + DeserializeOwned>(args: T, m: &ArgMatches, config: Option<&Map<String, Value>>) -> CliResult<T> {
    let Some(cfg) = config else { return Ok(args) };
    let mut v = serde_json::to_value(&args)?;
    let Value::Object(obj) = &mut v else { return Ok(args) };
    for (k, val) in cfg {
        if obj.contains_key(k) {
            if m.value_source(k) != Some(ValueSource::CommandLine) {
                obj.insert(k.clone(), val.clone());
            }
        } else if !matches!(k.as_str(), "seed" | "threads" | "out" | "config") {
            return Err(CliError::Usage(format!("unknown config key {k:?}")));
        }
    }
    Ok(serde_json::from_value(v)?)
}

/// The innermost subcommand's matches and the command path.
fn leaf(m: &ArgMatches) -> (String, &ArgMatches) {
    let mut path = Vec::new();
    let mut cur = m;
    while let Some((name, sub)) = cur.subcommand() {
        path.push(name.to_string());
        cur = sub;
    }
    (path.join(" "), cur)
}

struct Ctx<'a> {
    m: &'a ArgMatches,
    config: Option<Map<String, Value>>,
    seed: u64,
    sink: Sink,
    echo: Value,
}

impl Ctx<'_> {
    fn opts<T: Serialize + DeserializeOwned>(&mut self, args: T) -> CliResult<T> {
        let merged = merge(args, self.m, self.config.as_ref())?;
        self.echo = serde_json::to_value(&merged)?;
        Ok(merged)
    }
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let matches = match Cli::command().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 2,
                _ => 2,
            };
            let _ = e.print();
            if code != 0 {
                report_error("usage", &e.kind().to_string());
            }
            return code;
        }
    };
    match dispatch(&matches, &argv) {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            let _ = writeln!(std::io::stderr(), "{}", Cli::command().render_usage());
            report_error("usage", &msg);
            2
        }
        Err(CliError::Domain(e)) => {
            report_error(error_kind(&e), &e.to_string());
            1
        }
    }
}

fn read_json(path: &Path) -> CliResult<Value> {
    let text = fs::read_to_string(path).map_err(Error::from)?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn dispatch(matches: &ArgMatches, argv: &[OsString]) -> CliResult<i32> {
    let start = Instant::now();
    let cli = Cli::from_arg_matches(matches).map_err(|e| CliError::Usage(e.to_string()))?;
    let (command, m) = leaf(matches);

    let mut config = None;
    let mut config_seed = None;
    if let Some(path) = &cli.config {
        let v = read_json(path)?;
        let Value::Object(mut obj) = v else {
            return Err(CliError::Usage("config must be a JSON object".into()));
        };
        // a run manifest carries its options under "config"
        if obj.contains_key("command") && obj.contains_key("config") {
            if obj["command"] != Value::String(command.clone()) {
                return Err(CliError::Usage(format!("manifest is for {:?}, not {command:?}", obj["command"])));
            }
            config_seed = obj.get("seed").and_then(Value::as_u64);
            obj = match obj.remove("config") {
                Some(Value::Object(o)) => o,
                _ => return Err(CliError::Usage("manifest config must be an object".into())),
            };
        }
        config_seed = obj.get("seed").and_then(Value::as_u64).or(config_seed);
        config = Some(obj);
    }
    let seed = cli.seed.or(config_seed).unwrap_or(0);
    let threads = cli.threads.or_else(|| {
        config.as_ref().and_then(|c| c.get("threads")).and_then(Value::as_u64).map(|t| t as usize)
    });
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        // ignore the error if a pool already exists (repeated calls in one process)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut ctx = Ctx { m, config, seed, sink: Sink::new(cli.out.clone())?, echo: Value::Null };

    let code = match cli.cmd {
        Cmd::Fields(a) => cmd_fields(&mut ctx, a)?,
        Cmd::Drift(a) => cmd_drift(&mut ctx, a)?,
        Cmd::Flux(a) => cmd_flux(&mut ctx, a)?,
        Cmd::Corrector { cmd: CorrectorCmd::Eval(a) } => cmd_corrector_eval(&mut ctx, a)?,
        Cmd::Corrector { cmd: CorrectorCmd::Sweep(a) } => cmd_corrector_sweep(&mut ctx, a)?,
        Cmd::Flow(a) => cmd_flow(&mut ctx, a)?,
        Cmd::Invariance(a) => cmd_invariance(&mut ctx, a)?,
        Cmd::Pushforward(a) => cmd_pushforward(&mut ctx, a)?,
        Cmd::Recur { cmd: RecurCmd::Discrete(a) } => cmd_discrete(&mut ctx, a)?,
        Cmd::Recur { cmd: RecurCmd::Continuous(a) } => cmd_continuous(&mut ctx, a)?,
        Cmd::Recur { cmd: RecurCmd::Poisson(a) } => cmd_poisson(&mut ctx, a)?,
        Cmd::Recur { cmd: RecurCmd::NearReturn(a) } => cmd_near_return(&mut ctx, a)?,
        Cmd::Control { cmd: ControlCmd::Plan(a) } => cmd_plan(&mut ctx, a)?,
        Cmd::Control { cmd: ControlCmd::Verify(a) } => cmd_verify(&mut ctx, a)?,
    };

    let mut outputs = ctx.sink.written.clone();
    let manifest_path = cli.out.as_ref().map(|d| d.join("manifest.json"));
    if let Some(p) = &manifest_path {
        outputs.push(p.display().to_string());
    }
    let manifest = RunManifest {
        command,
        argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
        config: ctx.echo,
        seed,
        threads,
        versions: json!({
            "recurflow": env!("CARGO_PKG_VERSION"),
            "target": format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS),
        }),
        wall_time_s: start.elapsed().as_secs_f64(),
        outputs,
    };
    match manifest_path {
        Some(p) => {
            let mut text = serde_json::to_string_pretty(&manifest)?;
            text.push('\n');
            fs::write(p, text).map_err(Error::from)?;
        }
        None => {
            let _ = writeln!(std::io::stderr(), "{}", json!({ "manifest": manifest }));
        }
    }
    Ok(code)
}

fn cmd_fields(ctx: &mut Ctx, a: FieldsArgs) -> CliResult<i32> {
    let a = ctx.opts(a)?;
    if a.f.field.is_none() {
        ctx.sink.json("fields.json", &json!({ "builtins": BUILTINS }), true)?;
        return Ok(0);
    }
    let v = load_field(&a.f)?;
    let mut report = json!({
        "field": a.f.field,
        "dim": v.dim(),
        "sup_bound": v.sup_bound(),
        "lip_bound": v.lip_bound(),
        "wavenumber_bound": v.wavenumber_bound(),
        "incompressible": v.is_incompressible_builtin(),
    });
    if let Some(x) = &a.x {
        report["x"] = json!(x.0);
        report["value"] = json!(eval_field(&v, &x.0)?);
        report["divergence_fd"] = json!(divergence_fd(&v, &x.0, DEFAULT_FD_STEP)?);
    }
    ctx.sink.json("fields.json", &report, true)?;
    Ok(0)
}

fn cmd_drift(ctx: &mut Ctx, a: DriftArgs) -> CliResult<i32> {
    let a = ctx.opts(a)?;
    let v = load_field(&a.f)?;
    let cfg = SamplerConfig {
        extent: a.extent,
        lattice_per_axis: a.lattice_per_axis,
        random: a.random,
        seed: ctx.seed,
        quad_nodes: a.quad_nodes,
    };
    let r = drift_sweep(&v, &a.scales.0, &cfg)?;
    let rows: Vec<Vec<String>> = r.scales.iter().zip(&r.sup_box_average).map(|(s, v)| vec![num(*s), num(*v)]).collect();
    ctx.sink.csv("drift.csv", &["scale".into(), "sup_box_average".into()], &rows, true)?;
    ctx.sink.json("drift.json", &r, false)?;
    Ok(0)
}

fn cmd_flux(ctx: &mut Ctx, a: FluxArgs) -> CliResult<i32> {
    let a = ctx.opts(a)?;
    let v = load_field(&a.f)?;
    let d = v.dim();
    let center = a.center.map(|c| c.0).unwrap_or_else(|| vec![0.0; d]);
    let mut rows = Vec::new();
    for &r in &a.radii.0 {
        let s = mean_flux_sphere(&v, v.wavenumber_bound(), &center, r, a.quad_nodes, None)?;
        rows.push(vec!["sphere".into(), num(r), num(s.value)]);
    }
    for &r in &a.radii.0 {
        let q = FluxBox { center: center.clone(), normal_axis: 0, side: 2.0 * r };
        rows.push(vec!["box".into(), num(r), num(mean_flux_box(&v, &q, a.quad_nodes)?)]);
    }
    ctx.sink.csv("flux.csv", &["surface".into(), "R".into(), "value".into()], &rows, true)?;
    Ok(0)
}

fn cmd_corrector_eval(ctx: &mut Ctx, a: CorrectorEvalArgs) -> CliResult<i32> {
    let a = ctx.opts(a)?;
    let v = load_field(&a.f)?;
    let x = require(a.x.clone(), "x")?.0;
    let d = v.dim();
    let psi = psi_for(d, a.p, a.alpha)?;
    let radius = a.working_radius.unwrap_or_else(|| x.iter().map(|t| t * t).sum::<f64>().sqrt());
    let mut quad = QuadratureConfig::for_working_radius(d, radius);
    if let Some(h) = a.lattice_spacing {
        quad.lattice_spacing = h;
    }
    let c = CorrectorField::new(v, psi, quad)?;
    let w = c.eval_with_error(&x)?;
    let div = c.div_exact(&x, &w.w)?;
    let report = json!({
        "field": a.f.field,
        "x": x,
        "alpha": psi.alpha,
        "p": psi.p,
        "W": w.w,
        "div_exact": div,
        "err_est": w.err_est,
        "tail_bound": w.tail_bound,
        "valid_radius": c.valid_radius(),
        "truncation_radius": c.truncation_radius(),
    });
    ctx.sink.json("corrector.json", &report, true)?;
    Ok(0)
}

fn cmd_corrector_sweep(ctx: &mut Ctx, a: CorrectorSweepArgs) -> CliResult<i32> {
    let a = ctx.opts(a)?;
    let v = load_field(&a.f)?;
    let d = v.dim();
    let p = a.p.unwrap_or_else(|| PsiParams::default_p(d));
    let grid = Window { lo: vec![-a.half; d], hi: vec![a.half; d], per_axis: a.n }.points()?;
    let radius = a.half * (d as f64).sqrt() + a.fd_step;
    let quad = QuadratureConfig::for_working_radius(d, radius);
    let rows = alpha_sweep(&v, p, &a.alphas.0, &grid, &quad, a.fd_step)?;
    let csv_rows: Vec<Vec<String>> =
        rows.iter().map(|r| vec![num(r.alpha), num(r.sup_w), num(r.sup_div_w), num(r.sup_dw)]).collect();
    let header = ["alpha", "sup_W", "sup_divW", "sup_dW"].map(String::from);
    ctx.sink.csv("sweep.csv", &header, &csv_rows, true)?;
    ctx.sink.json("sweep.json", &rows, false)?;
    Ok(0)
}

fn cmd_flow(ctx: &mut Ctx, a: FlowArgs) -> CliResult<i32> {
    let a = ctx.opts(a)?;
    let v = load_field(&a.f)?;
    let x = require(a.x.clone(), "x")?.0;
    let window = (inf_norm(&x) + 1.5 * v.sup_bound() * a.time.abs() + 1.0).clamp(5.0, 60.0);
    let f = build_corrected(v, &a.c, window, a.f.field.as_deref().unwrap_or(""))?;
    let cfg = FlowConfig { step: a.step, horizon: a.time.abs() };
    let traj = integrate(&f, &x, a.time, &cfg, a.every, f.id())?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=x.len()).map(|i| format!("x{i}")));
    let rows: Vec<Vec<String>> = traj
        .times
        .iter()
        .zip(&traj.states)
        .map(|(t, s)| std::iter::once(num(*t)).chain(s.iter().map(|v| num(*v))).collect())
        .collect();
    ctx.sink.csv("flow.csv", &header, &rows, true)?;
    Ok(0)
}

fn cmd_invariance(ctx: &mut Ctx, a: InvarianceArgs) -> CliResult<i32> {
    use rayon::prelude::*;
    let a = ctx.opts(a)?;
    let v = load_field(&a.f)?;
    let d = v.dim();
    let psi = psi_for(d, a.p, a.alpha)?;
    let grid = Window { lo: vec![-a.half; d], hi: vec![a.half; d], per_axis: a.n }.points()?;
    let corrector = if a.no_corrector {
        None
    } else {
        let quad = QuadratureConfig::for_working_radius(d, a.half * (d as f64).sqrt() + a.fd_step);
        Some(CorrectorField::new(v.clone(), psi, quad)?)
    };
    let results = grid
        .par_iter()
        .map(|x| invariance_residual(&v, corrector.as_ref().map(|c| c as &dyn Field), &psi, x, a.fd_step))
        .collect::<crate::Result<Vec<_>>>()?;
    let max_residual = results.iter().map(|r| r.residual.abs()).fold(0.0, f64::max);
    let max_reference = results.iter().map(|r| r.reference.abs()).fold(0.0, f64::max);
    let report = json!({
        "field": a.f.field,
        "alpha": psi.alpha,
        "p": psi.p,
        "with_corrector": !a.no_corrector,
        "points": grid.len(),
        "max_residual": max_residual,
        "max_reference": max_reference,
        "ratio": if max_reference > 0.0 { max_residual / max_reference } else { 0.0 },
    });
    ctx.sink.json("invariance.json", &report, true)?;
    Ok(0)
}

fn cmd_pushforward(ctx: &mut Ctx, a: PushforwardArgs) -> CliResult<i32> {
    let a = ctx.opts(a)?;
    let v = load_field(&a.f)?;
    let d = v.dim();
    let psi = psi_for(d, a.p, a.alpha)?;
    let corr = CorrArgs {
        alpha: (!a.no_corrector).then_some(a.alpha),
        p: Some(psi.p),
        window: a.window,
        lattice_spacing: a.lattice_spacing,
    };
    let default_window = a.half_width + a.time.abs() * (v.sup_bound() + 1.0) + 0.5;
    let f = build_corrected(v, &corr, default_window, a.f.field.as_deref().unwrap_or(""))?;
    let cfg = PushforwardConfig {
        half_width: a.half_width,
        n_particles: a.particles,
        time: a.time,
        seed: ctx.seed,
        bumps_per_axis: a.bumps,
        bootstrap: a.bootstrap,
        step: a.step,
    };
    let r = pushforward_test(&f, &psi, &cfg)?;
    ctx.sink.json("pushforward.json", &r, true)?;
    Ok(0)
}

fn parse_ints(s: &str) -> CliResult<Vec<i64>> {
    s.split(',')
        .map(|t| t.trim().parse::<i64>().map_err(|_| CliError::Usage(format!("bad integer {t:?}"))))
        .collect()
}

fn cmd_discrete(ctx: &mut Ctx, a: DiscreteArgs) -> CliResult<i32> {
    let a = ctx.opts(a)?;
    let u = require(a.u.clone(), "U")?;
    let report = match (&a.perm, &a.lattice) {
        (Some(perm), None) => {
            let map = if let Some(n) = perm.strip_prefix("cycle:") {
                FiniteMap::cycle(n.parse().map_err(|_| CliError::Usage(format!("bad size in {perm:?}")))?)?
            } else if let Some(n) = perm.strip_prefix("random:") {
                let n = n.parse().map_err(|_| CliError::Usage(format!("bad size in {perm:?}")))?;
                FiniteMap::random_permutation(n, ctx.seed)?
            } else if let Some(list) = perm.strip_prefix("map:") {
                let m: Vec<usize> = parse_ints(list)?.into_iter().map(|i| i as usize).collect();
                let n = m.len();
                FiniteMap::new(m, vec![1.0; n])?
            } else {
                return Err(CliError::Usage(format!("unknown permutation {perm:?}")));
            };
            let states = parse_ints(&u)?;
            if let Some(s) = states.iter().find(|&&s| s < 0 || s as usize >= map.len()) {
                return Err(CliError::Usage(format!("state {s} is outside 0..{}", map.len())));
            }
            let states: Vec<usize> = states.into_iter().map(|s| s as usize).collect();
            poincare_discrete_check(&map, &states, a.horizon)?
        }
        (None, Some(lat)) => {
            let points: Vec<Vec<i64>> = u.split(';').map(parse_ints).collect::<CliResult<_>>()?;
            let dim = points[0].len();
            let map = if let Some(s) = lat.strip_prefix("translate:") {
                LatticeMap::Translate(parse_ints(s)?)
            } else if lat == "rotate" {
                LatticeMap::Rotate
            } else {
                return Err(CliError::Usage(format!("unknown lattice map {lat:?}")));
            };
            let weight = if a.weight == "counting" {
                LatticeWeight::Counting
            } else if let Some(rest) = a.weight.strip_prefix("psi:") {
                let pa = parse_point(rest)?;
                if pa.len() != 2 {
                    return Err(CliError::Usage("weight psi:p,alpha needs two numbers".into()));
                }
                LatticeWeight::Psi { p: pa[0], alpha: pa[1] }
            } else {
                return Err(CliError::Usage(format!("unknown weight {:?}", a.weight)));
            };
            let sys = LatticeSystem::new(dim, map, weight)?;
            poincare_discrete_check(&sys, &points, a.horizon)?
        }
        _ => return Err(CliError::Usage("give exactly one of --perm and --lattice".into())),
    };
    ctx.sink.json("discrete.json", &report, true)?;
    let rows: Vec<Vec<String>> = report.return_events.iter().map(|n| vec![n.to_string()]).collect();
    ctx.sink.csv("returns.csv", &["n".into()], &rows, false)?;
    Ok(0)
}

fn cmd_continuous(ctx: &mut Ctx, a: ContinuousArgs) -> CliResult<i32> {
    let a = ctx.opts(a)?;
    let v = load_field(&a.f)?;
    let window = (inf_norm(&a.center.0) + a.radius + 10.0).max(60.0);
    let f = build_corrected(v, &a.c, window, a.f.field.as_deref().unwrap_or(""))?;
    let psi = if a.sample_mu {
        let alpha = require(a.c.alpha, "alpha")?;
        Some(psi_for(f.dim(), a.c.p, alpha)?)
    } else {
        None
    };
    let cfg = ReturnScanConfig {
        tau: a.tau,
        horizon: a.horizon,
        n_particles: a.particles,
        seed: ctx.seed,
        step: a.step,
        histogram_bins: a.bins,
    };
    let ball = Ball { center: a.center.0.clone(), radius: a.radius };
    let r = continuous_return_scan(&f, psi.as_ref(), &ball, &cfg)?;
    ctx.sink.json("continuous.json", &r, true)?;
    let rows: Vec<Vec<String>> = r.return_times.iter().map(|t| vec![num(*t)]).collect();
    ctx.sink.csv("return_times.csv", &["t".into()], &rows, false)?;
    Ok(0)
}

fn cmd_poisson(ctx: &mut Ctx, a: PoissonArgs) -> CliResult<i32> {
    let a = ctx.opts(a)?;
    let v = load_field(&a.f)?;
    let d = v.dim();
    let lo = a.lo.clone().map(|p| p.0).unwrap_or_else(|| vec![-3.0; d]);
    let hi = a.hi.clone().map(|p| p.0).unwrap_or_else(|| vec![3.0; d]);
    let window = (inf_norm(&lo).max(inf_norm(&hi)) + 10.0).max(30.0);
    let f = build_corrected(v, &a.c, window, a.f.field.as_deref().unwrap_or(""))?;
    let cfg = PoissonConfig { tau: a.tau, horizon: a.horizon, eps: a.eps, step: a.step };
    let r = poisson_stability_scan(&f, &Window { lo, hi, per_axis: a.per_axis }, &cfg)?;
    ctx.sink.json("poisson.json", &r, true)?;
    Ok(0)
}

fn cmd_near_return(ctx: &mut Ctx, a: NearReturnArgs) -> CliResult<i32> {
    let a = ctx.opts(a)?;
    let v = load_field(&a.f)?;
    let x = require(a.x.clone(), "x")?.0;
    let window = (inf_norm(&x) + 10.0).max(30.0);
    let f = build_corrected(v, &a.c, window, a.f.field.as_deref().unwrap_or(""))?;
    let r = near_return_search(&f, &x, a.tau, a.horizon, a.step)?;
    ctx.sink.json("near_return.json", &json!({ "x": x, "t": r.t, "distance": r.distance }), true)?;
    Ok(0)
}

/// Rebuilds the planning field described by a plan spec.
fn plan_field(spec: &PlanSpec) -> CliResult<CorrectedField> {
    let v = VectorField::from_name(&spec.field, spec.dim)?;
    let default_window = inf_norm(&spec.reach.x0).max(inf_norm(&spec.reach.y0)) + 5.0;
    let c = CorrArgs { alpha: spec.alpha, p: spec.p, window: spec.window, lattice_spacing: spec.lattice_spacing };
    build_corrected(v, &c, default_window, &spec.field)
}

fn cmd_plan(ctx: &mut Ctx, a: PlanArgs) -> CliResult<i32> {
    let a = ctx.opts(a)?;
    let path = require(a.spec.clone(), "spec")?;
    let spec: PlanSpec = serde_json::from_value(read_json(&path)?)?;
    ctx.echo = json!({ "spec": spec });
    let f = plan_field(&spec)?;
    let result = plan_reach(&f, &spec.reach)?;
    let verification = verify_schedule(&f, &result.schedule, &spec.reach)?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=spec.reach.x0.len()).map(|i| format!("x{i}")));
    let rows: Vec<Vec<String>> = result
        .trajectory
        .times
        .iter()
        .zip(&result.trajectory.states)
        .map(|(t, s)| std::iter::once(num(*t)).chain(s.iter().map(|v| num(*v))).collect())
        .collect();
    let out = PlanOutput { spec, result };
    let mut v = serde_json::to_value(&out)?;
    v["verification"] = serde_json::to_value(&verification)?;
    ctx.sink.json("plan.json", &v, true)?;
    ctx.sink.csv("trajectory.csv", &header, &rows, false)?;
    Ok(0)
}

fn cmd_verify(ctx: &mut Ctx, a: VerifyArgs) -> CliResult<i32> {
    let a = ctx.opts(a)?;
    let path = require(a.result.clone(), "result")?;
    let stored: PlanOutput = serde_json::from_value(read_json(&path)?)?;
    let f = plan_field(&stored.spec)?;
    let v = verify_schedule(&f, &stored.result.schedule, &stored.spec.reach)?;
    let report = json!({
        "planned_status": stored.result.status,
        "pass": v.pass,
        "arrival_error": v.arrival_error,
        "composed_sup_norm": v.composed_sup_norm,
        "delta": stored.spec.reach.delta,
        "arrival_tol": stored.spec.reach.arrival_tol,
    });
    ctx.sink.json("verify.json", &report, true)?;
    Ok(if v.pass { 0 } else { 1 })
}
