//! `slipctl`: run scenarios, plot traces, precompute gains, serve the tuning
//! API and run the acceptance suite.
//!
//! Exit codes: 0 success, 1 acceptance failure, 2 usage error, 3 invalid
//! config or maneuver, 4 simulation diverged or gain synthesis failed,
//! 5 file or network I/O.

mod plot;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use slipctl::acceptance::{run_all, Fault};
use slipctl::config::SimConfig;
use slipctl::metrics::compute_metrics;
use slipctl::mpc::{cached_gains, gain_cache_key, synthesize, write_gains, MpcGains};
use slipctl::scenario::{fixture, fixture_ids, run_scenario_with_gains, ControllerKind, EstimatorKind, Maneuver};
use slipctl::{ConfigError, MpcError, SimError};
use slipctl_service::ServiceOptions;

#[derive(Parser)]
#[command(name = "slipctl", version, about = "Longitudinal slip-control workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate maneuvers and write trace CSV plus metrics JSON.
    Run(RunArgs),
    /// Render a trace CSV as an SVG figure.
    Plot(PlotArgs),
    /// Synthesize MPC gains and write them to a file.
    Gains(GainsArgs),
    /// Serve the tuning API.
    Serve(ServeArgs),
    /// Run the acceptance suite.
    Accept(AcceptArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Simulation config (TOML); defaults apply to omitted keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<SimConfig, CliError> {
        match &self.config {
            Some(p) => SimConfig::load(p).map_err(|e| CliError::config(p, e)),
            None => Ok(SimConfig::default()),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ControllerArg {
    Mpc,
    Pid,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Esc,
    Sliding,
    Fixed,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Fixture id or path to a maneuver TOML file; repeat for several.
    #[arg(long, short, required_unless_present_any = ["all", "list"])]
    maneuver: Vec<String>,
    /// Run every built-in fixture.
    #[arg(long, conflicts_with = "maneuver")]
    all: bool,
    /// Print the built-in fixture ids and exit.
    #[arg(long)]
    list: bool,
    /// Override the maneuver's tracking controller.
    #[arg(long, value_enum)]
    controller: Option<ControllerArg>,
    /// Override the maneuver's slip-reference estimator.
    #[arg(long, value_enum)]
    estimator: Option<EstimatorArg>,
    /// Override the maneuver's noise seed (fixtures default to their own).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
    /// Directory for cached MPC gains; synthesized each run when unset.
    #[arg(long, env = "SLIPCTL_GAIN_CACHE")]
    gain_cache: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// Trace CSV written by `run`.
    trace: PathBuf,
    /// Output SVG; defaults to the trace path with an .svg extension.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1200)]
    width: u32,
    #[arg(long, default_value_t = 900)]
    height: u32,
}

#[derive(Args)]
struct GainsArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Output file; defaults to `gains-<key>.bin` in the gain cache directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long, env = "SLIPCTL_GAIN_CACHE", default_value = "gains")]
    gain_cache: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, env = "SLIPCTL_LISTEN", default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// One JSON file per session is kept here.
    #[arg(long, env = "SLIPCTL_DATA_DIR", default_value = "slipctl-data")]
    data_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    None,
    /// Negate the state-feedback gain before checking it.
    GainSignFlip,
}

#[derive(Args)]
struct AcceptArgs {
    /// Inject a fault to check that the suite can fail.
    #[arg(long, value_enum, default_value = "none")]
    fault: FaultArg,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{path}: {source}")]
    Config { path: String, source: ConfigError },
    #[error(transparent)]
    Invalid(ConfigError),
    #[error("{context}: {source}")]
    Sim { context: String, source: SimError },
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Other(String),
    #[error("{0} of {1} acceptance criteria failed")]
    Acceptance(usize, usize),
}

impl CliError {
    fn config(path: &Path, source: ConfigError) -> Self {
        Self::Config { path: path.display().to_string(), source }
    }
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }

    fn exit_code(&self) -> u8 {
        match self {
            Self::Acceptance(..) => 1,
            Self::Config { .. } | Self::Invalid(_) => 3,
            Self::Sim { source: SimError::Config(_), .. } => 3,
            Self::Sim { source: SimError::Export(_), .. } => 5,
            Self::Sim { .. } | Self::Mpc(_) => 4,
            Self::Io { .. } | Self::Other(_) => 5,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Plot(a) => plot::plot(&a.trace, a.out.as_deref(), a.width, a.height),
        Command::Gains(a) => gains(a),
        Command::Serve(a) => serve(a),
        Command::Accept(a) => accept(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn load_maneuver(spec: &str) -> Result<Maneuver, CliError> {
    let path = Path::new(spec);
    if spec.ends_with(".toml") || path.exists() {
        Maneuver::load(path).map_err(|e| CliError::config(path, e))
    } else {
        fixture(spec).map_err(CliError::Invalid)
    }
}

fn run(a: RunArgs) -> Result<(), CliError> {
    if a.list {
        for id in fixture_ids() {
            println!("{id}");
        }
        return Ok(());
    }
    let cfg = a.config.load()?;
    let specs: Vec<String> = if a.all { fixture_ids().iter().map(|s| s.to_string()).collect() } else { a.maneuver.clone() };
    let mut maneuvers = Vec::new();
    for s in &specs {
        let mut m = load_maneuver(s)?;
        if let Some(c) = a.controller {
            m.controller = match c {
                ControllerArg::Mpc => ControllerKind::Mpc,
                ControllerArg::Pid => ControllerKind::Pid,
            };
        }
        if let Some(e) = a.estimator {
            m.estimator = match e {
                EstimatorArg::Esc => EstimatorKind::Esc,
                EstimatorArg::Sliding => EstimatorKind::Sliding,
                EstimatorArg::Fixed => EstimatorKind::Fixed,
            };
        }
        if let Some(seed) = a.seed {
            m.seed = seed;
        }
        m.validate().map_err(CliError::Invalid)?;
        maneuvers.push(m);
    }
    let gains = if maneuvers.iter().any(|m| m.controller == ControllerKind::Mpc) {
        let g = match &a.gain_cache {
            Some(dir) => cached_gains(dir, &cfg.vehicle, &cfg.mpc.cost())?,
            None => synthesize(&cfg.vehicle, &cfg.mpc.cost())?,
        };
        Some(Arc::new(g))
    } else {
        None
    };
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;

    // independent scenarios run in parallel
    let results: Vec<Result<(), CliError>> = std::thread::scope(|s| {
        let handles: Vec<_> = maneuvers.iter().map(|m| s.spawn(|| run_one(m, &cfg, gains.clone(), &a.out))).collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(CliError::Other("scenario thread panicked".into())))).collect()
    });
    results.into_iter().collect()
}

fn run_one(m: &Maneuver, cfg: &SimConfig, gains: Option<Arc<MpcGains>>, out: &Path) -> Result<(), CliError> {
    let gains = if m.controller == ControllerKind::Mpc { gains } else { None };
    let trace = run_scenario_with_gains(m, cfg, gains).map_err(|source| CliError::Sim { context: m.name.clone(), source })?;
    let csv_path = out.join(format!("{}.csv", m.name));
    let file = std::fs::File::create(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    trace.write_csv(std::io::BufWriter::new(file)).map_err(|source| CliError::Sim { context: m.name.clone(), source })?;
    let metrics = compute_metrics(&trace);
    let json_path = out.join(format!("{}.metrics.json", m.name));
    let text = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    std::fs::write(&json_path, text + "\n").map_err(|e| CliError::io(&json_path, e))?;
    println!(
        "{}: {} steps, overshoot {:.2} pt, tracking rms {:.4} m/s -> {}",
        m.name,
        trace.rows.len(),
        metrics.overshoot,
        metrics.tracking_rms,
        csv_path.display()
    );
    Ok(())
}

fn gains(a: GainsArgs) -> Result<(), CliError> {
    let mut cfg = a.config.load()?;
    cfg.mpc.p = a.p.unwrap_or(cfg.mpc.p);
    cfg.mpc.q = a.q.unwrap_or(cfg.mpc.q);
    cfg.mpc.r = a.r.unwrap_or(cfg.mpc.r);
    cfg.mpc.horizon = a.horizon.unwrap_or(cfg.mpc.horizon);
    cfg.validate().map_err(CliError::Invalid)?;
    let cost = cfg.mpc.cost();
    let key = gain_cache_key(&cfg.vehicle, &cost);
    let path = a.out.unwrap_or_else(|| a.gain_cache.join(format!("gains-{key}.bin")));
    let started = std::time::Instant::now();
    let g = synthesize(&cfg.vehicle, &cost)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    write_gains(&path, &g)?;
    println!(
        "N = {}, condition bound {:.3e}, {:.2} s -> {}",
        g.horizon,
        g.condition_bound,
        started.elapsed().as_secs_f64(),
        path.display()
    );
    Ok(())
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let options = ServiceOptions { base_config: a.config.load()?, ..ServiceOptions::default() };
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Other(e.to_string()))?;
    rt.block_on(slipctl_service::serve(a.listen, &a.data_dir, options)).map_err(|e| CliError::Other(e.to_string()))
}

fn accept(a: AcceptArgs) -> Result<(), CliError> {
    let fault = match a.fault {
        FaultArg::None => Fault::None,
        FaultArg::GainSignFlip => Fault::GainSignFlip,
    };
    let results = run_all(fault);
    for r in &results {
        println!("{}", r.line());
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        return Err(CliError::Acceptance(failed, results.len()));
    }
    Ok(())
}
