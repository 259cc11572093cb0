//! Command-line front end: training runs, verification batteries,
//! deterministic evaluation, energy-grid export and σ_init sweeps.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use stableflow_core::dynamics::TaskKind;

pub mod commands;
pub mod config;
pub mod output;

use config::ExperimentConfig;

/// Failure classes, each with its own process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, configuration or input files (exit 2).
    Usage(String),
    /// A checked property failed (exit 1).
    Verification(String),
    /// The request is valid but not defined for this input (exit 1).
    Unsupported(String),
    /// The simulation or training blew up numerically (exit 3).
    Divergence(String),
    /// Filesystem error (exit 2).
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Verification(_) | CliError::Unsupported(_) => 1,
            CliError::Usage(_) | CliError::Io(_) => 2,
            CliError::Divergence(_) => 3,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
            CliError::Unsupported(m) => write!(f, "unsupported: {m}"),
            CliError::Divergence(m) => write!(f, "numeric divergence: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<stableflow_core::Error> for CliError {
    fn from(e: stableflow_core::Error) -> Self {
        use stableflow_core::Error as E;
        match e {
            E::Divergence { .. }
            | E::NonFinite(_)
            | E::NonFiniteLayer { .. }
            | E::NonFiniteLoss { .. }
            | E::SingularMass { .. } => CliError::Divergence(e.to_string()),
            E::UnsupportedDimension(_) => CliError::Unsupported(e.to_string()),
            E::Io(err) => CliError::Io(err.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse().map_err(|e: stableflow_core::Error| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "stableflow", version, about = "Stable normalizing-flow control experiments")]
pub struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory; STABLEFLOW_OUT takes precedence when set.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Replaces the configured seed list with this single seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Independent jobs (seeds, sweep points, verification cases) run in parallel.
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    pub jobs: usize,
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct StartsArgs {
    /// JSON array of start states: `[x0, x1]` or `{"x": [...], "xdot": [...]}`.
    #[arg(long, value_name = "FILE")]
    pub starts: Option<PathBuf>,
    /// Draw this many starts from the task's initial distribution.
    #[arg(long, value_name = "K", conflicts_with = "starts")]
    pub n_random: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one policy per configured seed.
    Train,
    /// Run the stability and passivity checks.
    #[command(group = clap::ArgGroup::new("source").required(true).args(["checkpoint", "random_flows"]))]
    Verify {
        /// Normalizing-flow checkpoint to verify.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Verify this many randomly initialized flows instead.
        #[arg(long, value_name = "N")]
        random_flows: Option<usize>,
        /// Overrides the configured task.
        #[arg(long, value_parser = parse_task)]
        task: Option<TaskKind>,
        /// Random start states per flow.
        #[arg(long = "n-starts", value_name = "K", default_value_t = 10)]
        n_starts: usize,
    },
    /// Deterministic rollouts of a checkpoint.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_task)]
        task: Option<TaskKind>,
        #[command(flatten)]
        starts: StartsArgs,
    },
    /// Export the zero-velocity energy grid and overlaid rollouts.
    Grid {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_task)]
        task: Option<TaskKind>,
        /// `x_min,x_max,y_min,y_max`; defaults to ±0.3 around the goal.
        #[arg(long, value_name = "BOX")]
        window: Option<String>,
        /// Grid points per axis.
        #[arg(long, value_name = "N", default_value_t = 101)]
        resolution: usize,
        #[command(flatten)]
        starts: StartsArgs,
    },
    /// Train both policy kinds for every σ_init and seed and summarize.
    SweepSigma {
        /// Comma-separated initial standard deviations.
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        sigmas: Vec<f64>,
    },
}

/// Settings shared by every subcommand.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    pub jobs: usize,
    pub quiet: bool,
}

impl Context {
    pub fn new(cli: &Cli, env_out: Option<PathBuf>) -> Result<Self, CliError> {
        let cfg = match &cli.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let out = env_out
            .or_else(|| cli.out.clone())
            .or_else(|| cfg.output.dir.clone())
            .unwrap_or_else(|| PathBuf::from("runs"));
        let seeds = cli.seed.map_or_else(|| cfg.ppo.seeds.clone(), |s| vec![s]);
        if cli.jobs == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        Ok(Context {
            cfg,
            out,
            seeds,
            jobs: cli.jobs,
            quiet: cli.quiet,
        })
    }

    /// Seed for auxiliary randomness (random flows, random starts).
    pub fn base_seed(&self) -> u64 {
        self.seeds[0]
    }

    pub fn say(&self, line: &str) {
        if !self.quiet {
            println!("{line}");
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let env_out = std::env::var_os("STABLEFLOW_OUT").filter(|v| !v.is_empty()).map(PathBuf::from);
    let mut ctx = Context::new(&cli, env_out)?;
    match cli.command {
        Command::Train => commands::train(&ctx),
        Command::Verify {
            checkpoint,
            random_flows,
            task,
            n_starts,
        } => {
            if let Some(kind) = task {
                ctx.cfg.task.kind = kind;
            }
            commands::verify(&ctx, checkpoint.as_deref(), random_flows, n_starts)
        }
        Command::Eval { checkpoint, task, starts } => {
            if let Some(kind) = task {
                ctx.cfg.task.kind = kind;
            }
            commands::eval(&ctx, &checkpoint, &starts)
        }
        Command::Grid {
            checkpoint,
            task,
            window,
            resolution,
            starts,
        } => {
            if let Some(kind) = task {
                ctx.cfg.task.kind = kind;
            }
            commands::grid(&ctx, &checkpoint, window.as_deref(), resolution, &starts)
        }
        Command::SweepSigma { sigmas } => commands::sweep_sigma(&ctx, &sigmas),
    }
}
