use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod dataset;
mod error;
mod output;

use config::RunConfig;
use error::{CliError, CliResult};

/// Masked correlative scan matching for radar odometry.
///
/// Settings come from built-in defaults, then the `--config` TOML file, then
/// command-line flags; later sources win.
#[derive(Debug, Parser)]
#[command(name = "maskscan", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Run seed; every command derives its own random stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Softmax temperature used for matching.
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic radar dataset.
    Simulate(SimulateArgs),
    /// Train a masking network.
    Train(TrainArgs),
    /// Estimate a trajectory for one episode.
    Odometry(OdometryArgs),
    /// Tune the temperature so predicted covariances match the errors.
    Calibrate(CalibrateArgs),
    /// Segment-based translational and rotational errors of a trajectory.
    Evaluate(EvaluateArgs),
    /// Raw-scan matching error (and runtime) against grid resolution.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long)]
    episodes: Option<usize>,
    /// Frames per episode.
    #[arg(long)]
    frames: Option<usize>,
    /// Leave moving vehicles out of the world.
    #[arg(long)]
    static_world: bool,
    /// Disable sensor noise.
    #[arg(long)]
    noise_free: bool,
    /// Replace an existing output directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Debug, Args)]
struct DatasetArg {
    /// Dataset directory written by `simulate`.
    #[arg(long, value_name = "DIR")]
    dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct WeightsArgs {
    /// Masking network weights.
    #[arg(long, value_name = "FILE")]
    weights: Option<PathBuf>,
    /// Match raw scans without a network.
    #[arg(long, conflicts_with = "weights")]
    no_weights: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DatasetArg,
    /// Output weights file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Loss history CSV (default: next to the weights).
    #[arg(long, value_name = "FILE")]
    history: Option<PathBuf>,
    /// Supervise the masks with proxy static-scene labels instead of poses.
    #[arg(long)]
    mask_supervised: bool,
    /// Start from these weights instead of a fresh initialisation.
    #[arg(long, value_name = "FILE")]
    init_weights: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
struct OdometryArgs {
    #[command(flatten)]
    data: DatasetArg,
    #[command(flatten)]
    weights: WeightsArgs,
    #[arg(long, default_value_t = 0)]
    episode: usize,
    /// Output trajectory CSV.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[command(flatten)]
    data: DatasetArg,
    #[command(flatten)]
    weights: WeightsArgs,
    /// Output CSV of (beta, mean Mahalanobis distance).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Output JSON summary.
    #[arg(long, value_name = "FILE")]
    summary: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Estimated trajectory CSV.
    #[arg(long, value_name = "FILE")]
    estimate: PathBuf,
    /// Ground-truth trajectory CSV; otherwise read from the dataset.
    #[arg(long, value_name = "FILE")]
    gt: Option<PathBuf>,
    #[command(flatten)]
    data: DatasetArg,
    #[arg(long, default_value_t = 0)]
    episode: usize,
    /// Output report JSON.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DatasetArg,
    /// Translational grid steps in meters, comma separated.
    #[arg(long, value_delimiter = ',')]
    resolutions: Option<Vec<f64>>,
    /// Skip runtime measurement so the output is reproducible.
    #[arg(long)]
    no_timing: bool,
    /// Output CSV.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    set(&mut cfg.seed, cli.seed);
    set(&mut cfg.threads, cli.threads);
    set(&mut cfg.matching.beta, cli.beta);
    let data = |cfg: &mut RunConfig, d: &DatasetArg| {
        if d.dataset.is_some() {
            cfg.paths.dataset.clone_from(&d.dataset);
        }
    };
    let weights = |cfg: &mut RunConfig, w: &WeightsArgs| {
        if w.weights.is_some() {
            cfg.paths.weights.clone_from(&w.weights);
        }
        if w.no_weights {
            cfg.paths.weights = None;
        }
    };
    match &cli.command {
        Command::Simulate(a) => {
            set(&mut cfg.simulate.episodes, a.episodes);
            set(&mut cfg.trajectory.frames, a.frames);
            if a.static_world {
                cfg.simulate.dynamic = false;
            }
            if a.noise_free {
                cfg.noise = maskscan::simworld::NoiseConfig::none();
            }
        }
        Command::Train(a) => {
            data(&mut cfg, &a.data);
            if a.init_weights.is_some() {
                cfg.paths.init_weights.clone_from(&a.init_weights);
            }
            set(&mut cfg.train.max_steps, a.max_steps);
            set(&mut cfg.train.learning_rate, a.learning_rate);
        }
        Command::Odometry(a) => {
            data(&mut cfg, &a.data);
            weights(&mut cfg, &a.weights);
        }
        Command::Calibrate(a) => {
            data(&mut cfg, &a.data);
            weights(&mut cfg, &a.weights);
        }
        Command::Evaluate(a) => data(&mut cfg, &a.data),
        Command::Sweep(a) => {
            data(&mut cfg, &a.data);
            set(&mut cfg.sweep.resolutions, a.resolutions.clone());
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = resolve(&cli)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| CliError::field("threads", &e.to_string()))?;
    }
    match &cli.command {
        Command::Simulate(a) => commands::simulate(&cfg, &a.out, a.overwrite),
        Command::Train(a) => commands::train_cmd(
            &cfg,
            commands::TrainArgs {
                out: &a.out,
                history: a.history.clone(),
                mask_supervised: a.mask_supervised,
            },
        ),
        Command::Odometry(a) => commands::odometry(&cfg, a.weights.no_weights, a.episode, &a.out),
        Command::Calibrate(a) => commands::calibrate(&cfg, a.weights.no_weights, &a.out, &a.summary),
        Command::Evaluate(a) => commands::evaluate(&cfg, &a.estimate, a.gt.as_deref(), a.episode, &a.out),
        Command::Sweep(a) => commands::sweep(&cfg, a.no_timing, &a.out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
