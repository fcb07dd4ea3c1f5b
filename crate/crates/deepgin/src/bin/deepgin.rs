//! Command-line front end; all logic lives in the library's `cli` module.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deepgin::cli;

#[derive(Parser)]
#[command(
    name = "deepgin",
    about = "Two-stage generative image inpainting: mask generation, training, tiled inference and evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate deterministic mask corpora (rect, freeform, cellular)
    Maskgen(MaskgenCmd),
    /// Two-stage training on a directory of PNG images
    Train(TrainCmd),
    /// Inpaint images through the tiled inference path
    Infer(InferCmd),
    /// PSNR/SSIM/L1 report over paired directories
    Eval(EvalCmd),
}

#[derive(Args)]
struct MaskgenCmd {
    /// rect, freeform or cellular
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Square mask side, or use --height/--width
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "masks")]
    out: PathBuf,
    /// Hole-fraction bounds "lo,hi" (freeform/cellular)
    #[arg(long, value_parser = parse_bounds)]
    bounds: Option<(f64, f64)>,
}

fn parse_bounds(s: &str) -> Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err("expected lo,hi".into());
    }
    let lo = parts[0].trim().parse().map_err(|_| "bad lower bound")?;
    let hi = parts[1].trim().parse().map_err(|_| "bad upper bound")?;
    Ok((lo, hi))
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| "expected key=value".into())
}

#[derive(Args)]
struct TrainCmd {
    /// Directory of training PNGs
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the loss log
    #[arg(long)]
    out: PathBuf,
    /// Configuration preset: toy or paper
    #[arg(long, default_value = "toy")]
    preset: String,
    /// Flat key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override single settings, e.g. --set g_lr=0.001 (repeatable)
    #[arg(long = "set", value_parser = parse_kv)]
    set: Vec<(String, String)>,
    /// warmup, main or both
    #[arg(long, default_value = "both")]
    stage: String,
    /// Resume from a checkpoint file
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct InferCmd {
    /// Checkpoint produced by `train`
    #[arg(long)]
    ckpt: PathBuf,
    /// Input images (treated as ground truth on valid pixels)
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Directory of mask PNGs paired with inputs by filename
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Mask family to generate when --masks is not given
    #[arg(long, default_value = "freeform")]
    mask_kind: String,
    #[arg(long, default_value_t = 0)]
    mask_seed: u64,
    #[arg(long, default_value = "inpainted")]
    out: PathBuf,
    /// Also write the raw (uncomposited) output
    #[arg(long)]
    raw: bool,
    /// Also write the coarse first-stage output
    #[arg(long)]
    coarse: bool,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct EvalCmd {
    /// Directory of completed images
    #[arg(long)]
    completed: PathBuf,
    /// Directory of ground-truth images
    #[arg(long)]
    gt: PathBuf,
    /// CSV report path
    #[arg(long, default_value = "eval_report.csv")]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

fn run() -> deepgin::error::Result<()> {
    match Cli::parse().cmd {
        Cmd::Maskgen(c) => cli::run_maskgen(&cli::MaskgenArgs {
            kind: c.kind,
            count: c.count,
            height: c.height.unwrap_or(c.size),
            width: c.width.unwrap_or(c.size),
            seed: c.seed,
            out: c.out,
            bounds: c.bounds,
        }),
        Cmd::Train(c) => cli::run_train(&cli::TrainArgs {
            data: c.data,
            out: c.out,
            preset: c.preset,
            config: c.config,
            set: c.set,
            stage: c.stage.parse()?,
            resume: c.resume,
        }),
        Cmd::Infer(c) => cli::run_infer(&cli::InferArgs {
            ckpt: c.ckpt,
            inputs: c.input,
            masks: c.masks,
            mask_kind: c.mask_kind,
            mask_seed: c.mask_seed,
            out: c.out,
            raw: c.raw,
            coarse: c.coarse,
            workers: c.workers,
        }),
        Cmd::Eval(c) => cli::run_eval(&cli::EvalArgs {
            completed: c.completed,
            gt: c.gt,
            out: c.out,
            workers: c.workers,
        }),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
