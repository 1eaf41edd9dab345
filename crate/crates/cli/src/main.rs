use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "cameo", version, about = "Correspondence-attention alignment experiments on synthetic multi-view scenes")]
struct Cli {
    /// Seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (CAMEO_THREADS takes precedence).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Floating-point width for training and inference.
    #[arg(long, global = true, default_value_t = 32, value_parser = parse_precision)]
    precision: u32,
    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Command,
}

fn parse_precision(s: &str) -> Result<u32, String> {
    match s {
        "32" => Ok(32),
        "64" => Ok(64),
        _ => Err("expected 32 or 64".into()),
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene set with pointmaps and Plücker grids.
    Synth(SynthArgs),
    /// Token correspondences for a scene or a whole dataset.
    Corr(CorrArgs),
    /// Train one denoiser arm.
    Train(TrainArgs),
    /// DDIM sampling of target views from a checkpoint.
    Sample(SampleArgs),
    /// Correspondence precision of matches from features, attention or pointmaps.
    Probe(ProbeArgs),
    /// Dump attention before and after an identity perturbation.
    Perturb(PerturbArgs),
    /// SVG and CSV summaries of metrics files and probe reports.
    Report(ReportArgs),
    /// synth, corr, train (two arms), probe and report in one directory.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 1)]
    pub scenes: usize,
    #[arg(long, default_value_t = 2)]
    pub views: usize,
    #[arg(long = "spread-deg")]
    pub spread_deg: Option<f64>,
    /// Render height and width.
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    pub res: Option<Vec<usize>>,
    /// Object size range in meters.
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    pub size: Option<Vec<f64>>,
    #[arg(long = "fov-deg")]
    pub fov_deg: Option<f64>,
    /// Start from a preset scene spec (`tiny` or `default`).
    #[arg(long, default_value = "default")]
    pub preset: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CorrArgs {
    /// A scene directory, or a dataset directory containing dataset.json.
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [16, 16])]
    pub tokens: Vec<usize>,
    #[arg(long, default_value_t = 1.5)]
    pub tau: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum LossArg {
    Ce,
    L1,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Model and optimizer defaults (`tiny` or `small`).
    #[arg(long, default_value = "tiny")]
    pub preset: String,
    #[arg(long, default_value_t = 0.02)]
    pub lambda: f64,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long = "eval-every")]
    pub eval_every: Option<usize>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// Held-out scenes taken from the end of the dataset (default: half).
    #[arg(long = "eval-scenes")]
    pub eval_scenes: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scene providing cameras and reference latents.
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 2.0)]
    pub cfg: f64,
    /// Views to generate (default: every view but the first).
    #[arg(long, num_args = 1..)]
    pub targets: Option<Vec<usize>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceArg {
    Features,
    Attention,
    Pointmap,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum MetricArg {
    Cosine,
    L2,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    /// Pair manifest (JSON), or a dataset directory to probe every view pair.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, value_enum)]
    pub source: SourceArg,
    #[arg(long, value_enum, default_value = "l2")]
    pub metric: MetricArg,
    #[arg(long, default_value_t = 1000)]
    pub topk: usize,
    #[arg(long, default_value_t = 0.02)]
    pub rho: f64,
    /// Resample feature and geometry grids to N×N before matching.
    #[arg(long = "resize-grid")]
    pub resize_grid: Option<usize>,
    /// Checkpoint whose supervised block provides attention maps for a dataset directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also write a per-bin SVG bar chart.
    #[arg(long)]
    pub svg: bool,
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PerturbArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Block whose attention becomes the identity (default: the supervised block).
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub metrics: Vec<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub probe: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    #[arg(long, default_value = "tiny")]
    pub preset: String,
    /// Full run configuration as JSON; replaces the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the iteration count of every arm.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Output directory (default: runs/<preset>-seed<seed>).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit-code classes.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Stage(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Stage(_) => 3,
        }
    }
}

pub struct Globals {
    pub seed: u64,
    pub precision: u32,
    pub threads: Option<usize>,
    pub quiet: bool,
}

impl Globals {
    pub fn log(&self, msg: &str) {
        if !self.quiet {
            eprintln!("cameo: {msg}");
        }
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, Failure> {
    let n = match std::env::var("CAMEO_THREADS") {
        Ok(v) if !v.trim().is_empty() => {
            Some(v.trim().parse::<usize>().map_err(|_| Failure::Config(format!("CAMEO_THREADS='{v}' is not a count")))?)
        }
        _ => flag,
    };
    if n == Some(0) {
        return Err(Failure::Config("thread count must be positive".into()));
    }
    Ok(n)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let threads = thread_count(cli.threads)?;
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Stage(format!("thread pool: {e}")))?;
    }
    let g = Globals { seed: cli.seed, precision: cli.precision, threads, quiet: cli.quiet };
    match cli.cmd {
        Command::Synth(a) => commands::synth(&g, a),
        Command::Corr(a) => commands::corr(&g, a),
        Command::Train(a) => commands::train(&g, a),
        Command::Sample(a) => commands::sample(&g, a),
        Command::Probe(a) => commands::probe(&g, a),
        Command::Perturb(a) => commands::perturb(&g, a),
        Command::Report(a) => commands::report(&g, a),
        Command::Pipeline(a) => commands::pipeline(&g, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(m) => eprintln!("cameo: configuration error: {m}"),
                Failure::Stage(m) => eprintln!("cameo: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
