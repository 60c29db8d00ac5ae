use std::path::PathBuf;
use std::process::ExitCode;

use bpc_core::distill::{Method, Preset};
use bpc_core::models::Family;
use bpc_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

#[derive(Parser, Debug)]
#[command(name = "bpc", version, about = "Bayesian pseudocoreset construction and evaluation")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Dataset generators.
    #[command(subcommand)]
    Data(DataCommand),
    /// Expert trajectories.
    #[command(subcommand)]
    Experts(ExpertsCommand),
    /// Distill a pseudocoreset.
    Distill(DistillArgs),
    /// Sample a posterior chain on a coreset.
    Sample(SampleArgs),
    /// Posterior-predictive metrics of a chain on test data.
    Eval(EvalArgs),
    /// Conjugate Gaussian benchmark over methods and coreset sizes.
    Synthetic(SyntheticArgs),
    /// Exact divergences between two Gaussians stored as JSON.
    Divergence(DivergenceArgs),
}

#[derive(Subcommand, Debug)]
enum DataCommand {
    /// Gaussian clusters on a circle in two dimensions.
    Blobs(BlobsArgs),
}

#[derive(Subcommand, Debug)]
enum ExpertsCommand {
    /// Train expert runs on the full dataset and save their trajectories.
    Train(ExpertsArgs),
}

#[derive(Args, Debug)]
pub struct Common {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "BPC_OUT", default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Model spec written by an earlier command; overrides the other model flags.
    #[arg(long)]
    pub model_file: Option<PathBuf>,
    #[arg(long, value_parser = parse_family)]
    pub model: Option<Family>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub classes: Option<usize>,
}

fn parse_family(s: &str) -> Result<Family, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args, Debug)]
pub struct BlobsArgs {
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 2.0)]
    pub radius: f64,
    #[arg(long, default_value_t = 1.0)]
    pub std: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file; `.csv` selects CSV, anything else the binary format.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExpertsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Number of expert runs.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Minibatch size; 0 trains full batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MethodArg {
    Rkl,
    W,
    Fkl,
    Dc,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Rkl => Method::Rkl,
            MethodArg::W => Method::W,
            MethodArg::Fkl => Method::Fkl,
            MethodArg::Dc => Method::Dc,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PresetArg {
    Ipc1,
    Ipc10,
    Ipc20,
}

impl PresetArg {
    pub fn preset(self) -> Preset {
        match self {
            PresetArg::Ipc1 => Preset::Ipc1,
            PresetArg::Ipc10 => Preset::Ipc10,
            PresetArg::Ipc20 => Preset::Ipc20,
        }
    }

    pub fn ipc(self) -> usize {
        match self {
            PresetArg::Ipc1 => 1,
            PresetArg::Ipc10 => 10,
            PresetArg::Ipc20 => 20,
        }
    }
}

#[derive(Args, Debug)]
pub struct DistillArgs {
    #[arg(long, value_enum)]
    pub method: MethodArg,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory of expert trajectory files.
    #[arg(long)]
    pub experts: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ipc10")]
    pub preset: PresetArg,
    /// Points per class (classifiers); defaults to the preset's count.
    #[arg(long, conflicts_with = "size")]
    pub ipc: Option<usize>,
    /// Total number of points, ignoring classes.
    #[arg(long)]
    pub size: Option<usize>,
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub outer_steps: Option<usize>,
    #[arg(long)]
    pub inner_steps: Option<usize>,
    #[arg(long)]
    pub expert_steps: Option<usize>,
    #[arg(long)]
    pub max_start: Option<usize>,
    #[arg(long)]
    pub inner_lr: Option<f64>,
    #[arg(long)]
    pub outer_lr: Option<f64>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub log_interval: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SamplerArg {
    Hmc,
    Asghmc,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long, value_enum)]
    pub sampler: SamplerArg,
    #[arg(long)]
    pub coreset: PathBuf,
    #[arg(long, value_enum, default_value = "ipc10")]
    pub preset: PresetArg,
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub leapfrog_steps: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub init_std: Option<f64>,
    #[arg(long)]
    pub momentum_std: Option<f64>,
    /// Weight decay of the potential energy.
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub momentum_decay: Option<f64>,
    #[arg(long)]
    pub noise_scale: Option<f64>,
    /// Gaussian jitter applied to the coreset at every A-SGHMC step.
    #[arg(long)]
    pub jitter: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Chain file written by `sample`.
    #[arg(long)]
    pub chain: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, default_value_t = bpc_core::evalmetrics::DEFAULT_ECE_BINS)]
    pub bins: usize,
    /// Labels for the summary row.
    #[arg(long, default_value = "")]
    pub method: String,
    #[arg(long)]
    pub ipc: Option<usize>,
    #[arg(long, default_value = "")]
    pub sampler: String,
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct SyntheticArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub outer_steps: Option<usize>,
    /// Comma-separated coreset sizes.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    /// Comma-separated methods among rkl, w, fkl.
    #[arg(long, value_delimiter = ',', value_enum)]
    pub methods: Option<Vec<MethodArg>>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Args, Debug)]
pub struct DivergenceArgs {
    #[arg(long)]
    pub p: PathBuf,
    #[arg(long)]
    pub q: PathBuf,
    /// Also report Monte-Carlo estimates from this many samples.
    #[arg(long)]
    pub mc: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Format(_) | Error::Integrity(_) | Error::Json(_) => 3,
        Error::Config(_) | Error::Shape { .. } | Error::Bounds(_) | Error::InsufficientData(_) => 4,
        Error::NonFinite { .. } | Error::Decomposition(_) | Error::DegenerateSegment => 5,
        Error::UnsupportedModel(_) => 6,
        Error::NotScalar(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Data(DataCommand::Blobs(a)) => commands::blobs(&a),
        Command::Experts(ExpertsCommand::Train(a)) => commands::experts_train(&a),
        Command::Distill(a) => commands::distill(&a),
        Command::Sample(a) => commands::sample(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Synthetic(a) => commands::synthetic(&a),
        Command::Divergence(a) => commands::divergence(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
