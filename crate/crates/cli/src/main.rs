use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod sweep;

/// Fit images as fields of anisotropic 2D Gaussians and render them at any scale.
#[derive(Parser, Debug)]
#[command(name = "continuum", version, about)]
struct Cli {
    /// Master seed; every random choice derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "CONTINUUM_THREADS", default_value_t = 0)]
    threads: usize,

    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,

    /// Write zero in every elapsed-time CSV column so reruns are byte-identical.
    #[arg(long, global = true)]
    no_timings: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a field to a PNG image.
    Fit(FitArgs),
    /// Render a field file to PNG at any size.
    Render(RenderArgs),
    /// Pool fitted covariances over a corpus into a prior.
    Stats(StatsArgs),
    /// Score a field against a ground-truth image.
    Eval(EvalArgs),
    /// Build once, then time renders over a sweep of scales.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Reparam,
    Unconstrained,
}

#[derive(Args, Debug, Clone)]
struct FitOptions {
    /// Optimizer steps.
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    /// Weight of the spectral loss against L1.
    #[arg(long, default_value_t = 0.1)]
    lambda_freq: f64,
    /// Kernels per pixel (a perfect square).
    #[arg(long, default_value_t = 4)]
    kpp: u32,
    /// Covariance dictionary size.
    #[arg(long, default_value_t = 730)]
    dict_size: usize,
    /// Prior JSON to sample the dictionary from (default: the built-in prior).
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Position drift bound in pixels, in (0, 1].
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Report every this many iterations.
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Target PNG.
    input: PathBuf,
    /// Output field (CGSF), the best-PSNR field seen. The report and a latent sidecar with the final logits are written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Reparam)]
    mode: Mode,
    /// Report CSV path (default: the output path with a .csv extension).
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    opts: FitOptions,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Field file (CGSF).
    field: PathBuf,
    /// Uniform scale factor; output is round(s*W) x round(s*H).
    #[arg(long, required_unless_present_all = ["width", "height"], conflicts_with_all = ["width", "height"])]
    scale: Option<f64>,
    /// Output width; requires --height.
    #[arg(long, requires = "height")]
    width: Option<u32>,
    /// Output height; requires --width.
    #[arg(long, requires = "width")]
    height: Option<u32>,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
    /// Evaluate every kernel at every pixel instead of splatting.
    #[arg(long)]
    exact: bool,
    /// Truncation radius in standard deviations.
    #[arg(long, default_value_t = 3.0)]
    rcut: f64,
    /// Also write the unquantized render as planar little-endian f32.
    #[arg(long)]
    raw: Option<PathBuf>,
    /// Largest allowed output side.
    #[arg(long, default_value_t = 16384)]
    max_dim: u32,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// Directory of PNG images and/or CGSF fields.
    dir: PathBuf,
    /// Output prior JSON.
    #[arg(long)]
    out: PathBuf,
    /// Iterations per image fit.
    #[arg(long, default_value_t = 500)]
    iters: usize,
    /// Kernels per pixel for image fits.
    #[arg(long, default_value_t = 4)]
    kpp: u32,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Field file (CGSF).
    field: PathBuf,
    /// Ground-truth PNG.
    #[arg(long)]
    gt: PathBuf,
    /// Scale of the ground truth relative to the field grid (default: inferred from widths).
    #[arg(long)]
    scale: Option<f64>,
    /// Score luma only (default).
    #[arg(long, conflicts_with = "rgb")]
    ychannel: bool,
    /// Score all three channels.
    #[arg(long)]
    rgb: bool,
    /// Border pixels ignored on each side (default: the rounded scale).
    #[arg(long)]
    shave: Option<usize>,
    /// Write the CSV row to this file instead of stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Field (CGSF) or image (PNG, fitted once).
    input: PathBuf,
    /// Scale sweep as lo:hi:count, inclusive and evenly spaced.
    #[arg(long, default_value = "4:48:40")]
    scales: String,
    /// CSV output (default: stdout).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Also save the field that was built (CGSF).
    #[arg(long)]
    field_out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Reparam)]
    mode: Mode,
    #[command(flatten)]
    opts: FitOptions,
}

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: 2,
            error: anyhow::anyhow!(msg.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Self {
            code: exit_code(&error),
            error,
        }
    }
}

impl From<continuum::Error> for Failure {
    fn from(e: continuum::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use continuum::Error as E;
    for cause in e.chain() {
        if let Some(ce) = cause.downcast_ref::<E>() {
            return match ce {
                E::Io(_) | E::Image(_) | E::Json(_) | E::Format(_) | E::EmptyCorpus => 3,
                E::NonFiniteLoss { .. } => 4,
                E::DimensionOverflow { .. } => 5,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

pub type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let ctx = commands::Context {
        seed: cli.seed,
        quiet: cli.quiet,
        timings: !cli.no_timings,
    };
    let result = match cli.command {
        Command::Fit(a) => commands::fit(&ctx, a),
        Command::Render(a) => commands::render(&ctx, a),
        Command::Stats(a) => commands::stats(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Bench(a) => commands::bench(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
