//! Batch experiment runner: every subcommand reads scenario directories and
//! checkpoints, writes its artifacts plus the resolved configuration into
//! an output location, and is byte-reproducible for a fixed seed.

pub mod commands;
pub mod config;
pub mod data;
pub mod svg;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{ConfigError, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(name = "chauffeur", version, about = "Closed-loop driving planner workbench")]
pub struct Cli {
    /// TOML experiment configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every stage; overrides CHAUFFEUR_SEED and the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for rollout and evaluation fan-out.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate scenario files and a manifest.
    Gen(GenArgs),
    /// Tokenize logged scenarios into a binary observation dump.
    DumpObs(DumpArgs),
    /// Imitation learning on logged actions.
    TrainIl(TrainIlArgs),
    /// PPO on closed-loop rollouts.
    TrainPpo(TrainPpoArgs),
    /// Select a representative subset from encoder latents.
    SneSample(SneArgs),
    /// Closed-loop benchmark of a checkpoint.
    Eval(EvalArgs),
    /// Benchmark under initial-pose shifts over a grid of magnitudes.
    ShiftEval(ShiftArgs),
    /// Render a sweep, embedding, training curve or trajectory as SVG.
    Plot(PlotArgs),
    /// Embed latents of logged and shifted starts together.
    FeatureViz(FeatureVizArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// straight, curve, intersection, parking or mixed.
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub density: Option<usize>,
    #[arg(long)]
    pub curvature: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub scenarios: PathBuf,
    /// bicycle or waypoint.
    #[arg(long)]
    pub action_space: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainIlArgs {
    /// Scenario directory; logged observations are built on the fly.
    #[arg(long, conflicts_with = "dump")]
    pub scenarios: Option<PathBuf>,
    /// Observation dump written by dump-obs.
    #[arg(long)]
    pub dump: Option<PathBuf>,
    /// bicycle or waypoint.
    #[arg(long)]
    pub action_space: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_updates: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainPpoArgs {
    #[arg(long)]
    pub scenarios: PathBuf,
    /// Warm start from any checkpoint; the RL head is used from then on.
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    #[arg(long)]
    pub total_timesteps: Option<usize>,
    #[arg(long)]
    pub steps_per_wave: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub w_ent: Option<f64>,
    /// non_reactive or reactive.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SneArgs {
    #[arg(long)]
    pub scenarios: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub pre_subset: Option<usize>,
    /// first or mean.
    #[arg(long)]
    pub feature_agg: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub scenarios: PathBuf,
    /// non_reactive or reactive.
    #[arg(long)]
    pub mode: Option<String>,
    /// Also write one step CSV per episode.
    #[arg(long)]
    pub trajectories: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ShiftArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub scenarios: PathBuf,
    /// Comma-separated position bounds in metres.
    #[arg(long, value_delimiter = ',')]
    pub grid_xy: Option<Vec<f64>>,
    /// Comma-separated heading bounds in degrees.
    #[arg(long, value_delimiter = ',')]
    pub grid_yaw: Option<Vec<f64>>,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// axis, yaw or both.
    #[arg(long)]
    pub shift_mode: Option<String>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// sweep, embedding, curve or trajectory.
    #[arg(long)]
    pub kind: String,
    /// CSV to plot: sweep.csv, embedding.csv, a training curve or an
    /// episode trajectory.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Scenario file for trajectory plots.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Curve column to plot against the first column.
    #[arg(long)]
    pub column: Option<String>,
    /// Sweep metric: AR, OR, CR or PR.
    #[arg(long, default_value = "AR")]
    pub metric: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FeatureVizArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub scenarios: PathBuf,
    #[arg(long)]
    pub shift_xy: Option<f64>,
    /// Degrees.
    #[arg(long)]
    pub shift_yaw: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Exit code for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.is::<ConfigError>()) {
        2
    } else {
        1
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(config::config_err("--jobs must be at least 1"));
        }
        // the pool may already exist when called repeatedly in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let mut cfg = ExperimentConfig::load(cli.config.as_deref())?;
    cfg.resolve_seed(cli.seed)?;
    match cli.command {
        Command::Gen(a) => commands::gen(cfg, a),
        Command::DumpObs(a) => commands::dump_obs(cfg, a),
        Command::TrainIl(a) => commands::train_il(cfg, a),
        Command::TrainPpo(a) => commands::train_ppo(cfg, a),
        Command::SneSample(a) => commands::sne_sample(cfg, a),
        Command::Eval(a) => commands::eval(cfg, a),
        Command::ShiftEval(a) => commands::shift_eval(cfg, a),
        Command::Plot(a) => commands::plot(cfg, a),
        Command::FeatureViz(a) => commands::feature_viz(cfg, a),
    }
}
