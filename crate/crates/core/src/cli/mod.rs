//! Command-line front end.
//!
//! Every subcommand accepts `--config FILE`, a `key = value` file whose keys
//! are long flag names. Flags given on the command line take precedence over
//! the file, which takes precedence over built-in defaults.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, CommandFactory, Parser, Subcommand, ValueEnum};

use crate::correspondence::{VoteRule, DEFAULT_LAMBDA};

pub use commands::{load_bank, run_command};

/// Invalid invocation, reported with exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub(crate) fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(
    name = "nmpose",
    version,
    about = "Pseudo-correspondences, neural mesh training and render-and-compare pose estimation"
)]
pub struct Cli {
    /// `key = value` file supplying defaults for any long flag
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// More log output on stderr (repeatable)
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic corpus with ground-truth poses and a template-view bank
    Synth(SynthArgs),
    /// Generate refined pseudo-correspondences for every manifest entry
    PseudoGen(PseudoGenArgs),
    /// Train neural mesh features from pseudo-correspondences
    Train(TrainArgs),
    /// Estimate poses by render-and-compare
    Infer(InferArgs),
    /// Score pose estimates and/or correspondences against ground truth
    Eval(EvalArgs),
    /// Train on growing prefixes of a corpus and report accuracy on a fixed evaluation set
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VoteArg {
    Count,
    Score,
}

impl From<VoteArg> for VoteRule {
    fn from(v: VoteArg) -> Self {
        match v {
            VoteArg::Count => VoteRule::Count,
            VoteArg::Score => VoteRule::ScoreWeighted,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MaskSource {
    /// Manifest masks; entries without one fall back to the activation mask
    External,
    /// Foreground estimated from feature activations
    Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    Table,
}

/// Pose grid used for template views and optimizer initialization.
#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    /// Azimuth samples over the full circle
    #[arg(long, default_value_t = 36)]
    pub grid_azimuths: usize,
    /// Grid elevations in degrees
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 15.0, 30.0])]
    pub grid_elevations: Vec<f64>,
    /// Camera distance of grid poses
    #[arg(long, default_value_t = 5.0)]
    pub grid_distance: f64,
}

#[derive(Debug, Clone, Args)]
pub struct OptimizerArgs {
    /// Grid candidates refined by gradient descent
    #[arg(long, default_value_t = 3)]
    pub candidates: usize,
    /// Iteration cap per candidate
    #[arg(long, default_value_t = 300)]
    pub max_iterations: usize,
    /// Initial step for angles (radians)
    #[arg(long, default_value_t = 0.05)]
    pub angle_step: f64,
    /// Initial distance step as a fraction of the starting distance
    #[arg(long, default_value_t = 0.02)]
    pub distance_step: f64,
    /// Relative objective improvement over 10 iterations below which a run stops
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
    /// Where the foreground mask comes from
    #[arg(long, value_enum, default_value_t = MaskSource::External)]
    pub mask_source: MaskSource,
    /// Minimum vertex similarity for activation-mask foreground
    #[arg(long, default_value_t = 0.0)]
    pub activation_threshold: f64,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Random seed
    #[arg(long)]
    pub seed: u64,
    /// Number of images
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    /// Feature channels
    #[arg(long, default_value_t = 64)]
    pub channels: usize,
    /// Per-component Gaussian noise before renormalization
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Fraction of foreground pixels replaced by background
    #[arg(long, default_value_t = 0.0)]
    pub occlusion: f64,
    /// Strength of view-dependent feature variation
    #[arg(long, default_value_t = 0.3)]
    pub view_strength: f64,
    /// Template mesh (default: built-in car-sized cuboid)
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// Camera file (default: 32x32, focal 50)
    #[arg(long)]
    pub camera: Option<PathBuf>,
    /// Mean camera distance of sampled poses
    #[arg(long, default_value_t = 5.0)]
    pub distance: f64,
    /// Relative distance jitter
    #[arg(long, default_value_t = 0.1)]
    pub distance_jitter: f64,
    /// Maximum sampled elevation in degrees
    #[arg(long, default_value_t = 30.0)]
    pub max_elevation: f64,
    /// Maximum in-plane rotation in degrees
    #[arg(long, default_value_t = 5.0)]
    pub max_theta: f64,
    /// Norm of per-vertex nuisance added to bank renders
    #[arg(long, default_value_t = 0.0)]
    pub bank_nuisance: f64,
    #[command(flatten)]
    pub grid: GridArgs,
}

/// Inputs needed to build the template-view bank.
#[derive(Debug, Clone, Args)]
pub struct BankArgs {
    /// Bank manifest: one feature map per view with its pose
    #[arg(long)]
    pub bank: PathBuf,
    /// Template mesh
    #[arg(long)]
    pub template: PathBuf,
    /// Camera file
    #[arg(long)]
    pub camera: PathBuf,
    /// Visibility down-weighting factor in [0, 1]
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    /// Pose vote aggregation
    #[arg(long, value_enum, default_value_t = VoteArg::Count)]
    pub vote: VoteArg,
}

#[derive(Debug, Clone, Args)]
pub struct PseudoGenArgs {
    /// Corpus manifest
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub bank: BankArgs,
    /// Output directory for `<id>.corr` files
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Training manifest (entries need masks)
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub bank: BankArgs,
    /// Output checkpoint
    #[arg(long)]
    pub out: PathBuf,
    /// Random seed for feature initialization
    #[arg(long)]
    pub seed: u64,
    /// Passes over the corpus
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    /// Softmax temperature
    #[arg(long, default_value_t = crate::rendercompare::DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    /// Feature update momentum in [0, 1]
    #[arg(long, default_value_t = crate::rendercompare::DEFAULT_MOMENTUM)]
    pub momentum: f64,
    /// Continue from this checkpoint instead of a random initialization
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    /// Corpus manifest
    #[arg(long)]
    pub manifest: PathBuf,
    /// Neural mesh checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Camera file
    #[arg(long)]
    pub camera: PathBuf,
    /// Estimates file (default: stdout)
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Manifest with ground-truth poses
    #[arg(long)]
    pub manifest: PathBuf,
    /// Pose estimates file
    #[arg(long)]
    pub estimates: Option<PathBuf>,
    /// Directory of `<id>.corr` files to score by PCK
    #[arg(long)]
    pub correspondences: Option<PathBuf>,
    /// Template mesh (needed for PCK)
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// Camera file (needed for PCK)
    #[arg(long)]
    pub camera: Option<PathBuf>,
    /// PCK threshold as a fraction of the object box size
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Output layout
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    pub format: ReportFormat,
    /// Report file (default: stdout)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// Training manifest; prefixes of it are used
    #[arg(long)]
    pub train_manifest: PathBuf,
    /// Held-out manifest with ground-truth poses
    #[arg(long)]
    pub eval_manifest: PathBuf,
    #[command(flatten)]
    pub bank: BankArgs,
    /// Training-set sizes
    #[arg(long, value_delimiter = ',', default_values_t = [64usize, 128, 256])]
    pub sizes: Vec<usize>,
    /// Random seed for feature initialization
    #[arg(long)]
    pub seed: u64,
    /// Passes over each training prefix
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    /// Softmax temperature
    #[arg(long, default_value_t = crate::rendercompare::DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    /// Feature update momentum in [0, 1]
    #[arg(long, default_value_t = crate::rendercompare::DEFAULT_MOMENTUM)]
    pub momentum: f64,
    /// Table file (default: stdout)
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> anyhow::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected `key = value`", i + 1)))?;
        let k = k.trim().replace('_', "-");
        if k.is_empty() {
            return Err(usage(format!("config line {}: empty key", i + 1)));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

fn find_config(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Appends config-file entries as flags unless the flag is already given.
fn merge_config(args: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    let Some(path) = find_config(&args) else {
        return Ok(args);
    };
    let text =
        std::fs::read_to_string(&path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let entries = parse_config(&text)?;
    let cmd = Cli::command();
    let sub = args
        .iter()
        .skip(1)
        .find_map(|a| cmd.find_subcommand(a.to_string_lossy().as_ref()))
        .ok_or_else(|| usage("config file given without a subcommand"))?;
    let given: Vec<String> = args
        .iter()
        .filter_map(|a| a.to_str())
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or("").to_string())
        .collect();
    let mut out = args.clone();
    for (key, value) in entries {
        if key == "config" {
            return Err(usage("config files cannot include other config files"));
        }
        let arg = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| usage(format!("unknown config key `{key}` for `{}`", sub.get_name())))?;
        if given.contains(&key) {
            continue;
        }
        match arg.get_action() {
            ArgAction::SetTrue | ArgAction::Count => match value.as_str() {
                "true" => out.push(format!("--{key}").into()),
                "false" => {}
                _ => return Err(usage(format!("config key `{key}` expects true or false"))),
            },
            _ => {
                out.push(format!("--{key}").into());
                out.push(value.into());
            }
        }
    }
    Ok(out)
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .try_init();
}

/// Parses arguments, runs the subcommand and maps the outcome to an exit code.
pub fn main_with_args(args: Vec<OsString>) -> ExitCode {
    let args = match merge_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(cli.verbose);
    if let Some(j) = cli.jobs {
        if j == 0 {
            eprintln!("error: --jobs must be positive");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    match run_command(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
