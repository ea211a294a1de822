//! `vqnerf`: scene generation, training, ranking, evaluation, editing and
//! serving from the command line.

mod checkpoint;
mod commands;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use vqnerf_core::decompose::FeatureSpace;
use vqnerf_core::edit::RenderMode;
use vqnerf_core::train::{TrainConfig, TrainMode};

#[derive(Parser, Debug, Serialize)]
#[command(name = "vqnerf", version, about = "Material decomposition and editing with a vector-quantized reflectance field")]
struct Cli {
    /// Worker threads for parallel rendering and training (default: all cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    threads: Option<u32>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
enum Command {
    /// Render a synthetic scene bundle with ground truth.
    Gen(GenArgs),
    /// Train a model on a scene bundle.
    Train(TrainArgs),
    /// Print the ranking error curve and the selected codebook length.
    Rank(RankArgs),
    /// Write per-view segmentation maps.
    Segment(SegmentArgs),
    /// Report PSNR, SSIM and segmentation scores as JSON.
    Eval(EvalArgs),
    /// Apply a script of edit operations and render every view.
    Edit(EditArgs),
    /// Render every view under new lighting.
    Relight(RelightArgs),
    /// Serve the editing HTTP API.
    Serve(ServeArgs),
    /// Dump per-pixel surface points, latents and codeword indices as CSV.
    ExportLatents(ExportArgs),
}

fn existing_dir(s: &str) -> Result<PathBuf, String> {
    let p = PathBuf::from(s);
    if p.is_dir() {
        Ok(p)
    } else {
        Err(format!("`{s}` is not a directory"))
    }
}

fn existing_file(s: &str) -> Result<PathBuf, String> {
    let p = PathBuf::from(s);
    if p.is_file() {
        Ok(p)
    } else {
        Err(format!("`{s}` is not a file"))
    }
}

#[derive(Args, Debug, Serialize)]
struct GenArgs {
    /// Scene preset: balls3, duo or single.
    #[arg(long)]
    preset: String,
    /// Output bundle directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Overrides the preset's camera-ring seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    env_rows: Option<usize>,
    #[arg(long)]
    env_cols: Option<usize>,
}

/// Overrides for every training hyperparameter; unset flags keep the
/// defaults.
#[derive(Args, Debug, Default, Serialize)]
pub struct TrainFlags {
    #[arg(long)]
    w1: Option<f64>,
    #[arg(long)]
    w2: Option<f64>,
    #[arg(long)]
    w3: Option<f64>,
    #[arg(long)]
    w4: Option<f64>,
    #[arg(long)]
    w5: Option<f64>,
    #[arg(long)]
    w6: Option<f64>,
    /// Commitment weight inside the quantization loss.
    #[arg(long)]
    lambda: Option<f64>,
    /// Smooth-loss chromaticity scale.
    #[arg(long)]
    alpha: Option<f64>,
    /// Smooth-loss chromaticity threshold.
    #[arg(long)]
    beta: Option<f64>,
    /// Ranking flatness tolerance.
    #[arg(long)]
    eps: Option<f64>,
    /// Initial codebook size.
    #[arg(long)]
    m0: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// joint or separate.
    #[arg(long)]
    mode: Option<TrainMode>,
    #[arg(long)]
    ema_decay: Option<f64>,
    #[arg(long)]
    ema_smoothing: Option<f64>,
    #[arg(long)]
    env_init: Option<f64>,
    /// Ranked codeword dropout (true or false).
    #[arg(long)]
    dropout: Option<bool>,
}

impl TrainFlags {
    pub fn resolve(&self) -> TrainConfig {
        let mut c = TrainConfig::default();
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(w1, w2, w3, w4, w5, w6, lambda, alpha, beta, eps, m0, steps, batch, lr, lr_min, seed, mode, ema_decay, ema_smoothing, env_init, dropout);
        c
    }
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Scene bundle directory.
    #[arg(long, value_parser = existing_dir)]
    scene: PathBuf,
    /// Checkpoint directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Progress line interval on stderr, in steps.
    #[arg(long, default_value_t = 500)]
    log_every: usize,
    #[command(flatten)]
    train: TrainFlags,
}

/// Checkpoint plus the scene it was trained on.
#[derive(Args, Debug, Serialize)]
struct CkptArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long, value_parser = existing_dir)]
    ckpt: PathBuf,
    /// Scene bundle; defaults to the one recorded in the checkpoint.
    #[arg(long, value_parser = existing_dir)]
    scene: Option<PathBuf>,
}

/// Codebook length: explicit, or chosen by ranking.
#[derive(Args, Debug, Serialize)]
struct LengthArgs {
    /// Codebook length to use; ranks and selects when omitted.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    m: Option<u32>,
    /// Ranking tolerance when `--m` is omitted (default: the training value).
    #[arg(long)]
    eps: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
struct RankArgs {
    #[command(flatten)]
    ckpt: CkptArgs,
    /// Ranking tolerance (default: the training value).
    #[arg(long)]
    eps: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
struct SegmentArgs {
    #[command(flatten)]
    ckpt: CkptArgs,
    #[command(flatten)]
    length: LengthArgs,
    /// Output directory for `view_NN.png` / `view_NN.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    ckpt: CkptArgs,
    #[command(flatten)]
    length: LengthArgs,
    /// Branch whose reconstruction is scored: continuous or discrete.
    #[arg(long, default_value = "continuous", value_parser = parse_mode)]
    branch: RenderMode,
    /// Comma-separated meanshift bandwidths to score as a baseline.
    #[arg(long, value_delimiter = ',')]
    meanshift: Vec<f64>,
    /// Meanshift feature space: attributes or attributes-latent.
    #[arg(long, default_value = "attributes-latent")]
    features: FeatureSpace,
    /// Most pixels used as meanshift seeds.
    #[arg(long, default_value_t = 1500)]
    max_seeds: usize,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<RenderMode, String> {
    s.parse().map_err(|e: vqnerf_core::edit::EditError| e.to_string())
}

#[derive(Args, Debug, Serialize)]
struct EditArgs {
    #[command(flatten)]
    ckpt: CkptArgs,
    #[command(flatten)]
    length: LengthArgs,
    /// Edit operations, as a JSON array or one JSON object per line.
    #[arg(long, value_parser = existing_file)]
    ops: PathBuf,
    /// Output directory for the rendered views.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "edited", value_parser = parse_mode)]
    branch: RenderMode,
}

#[derive(Args, Debug, Serialize)]
#[group(id = "lighting", required = true, multiple = false)]
struct LightingArgs {
    /// Environment map file (binary or text).
    #[arg(long, value_parser = existing_file)]
    env: Option<PathBuf>,
    /// Environment preset: two-lobe, dusk or uniform.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args, Debug, Serialize)]
struct RelightArgs {
    #[command(flatten)]
    ckpt: CkptArgs,
    #[command(flatten)]
    length: LengthArgs,
    #[command(flatten)]
    lighting: LightingArgs,
    /// Scalar multiplier on the environment radiance.
    #[arg(long, default_value_t = 1.0)]
    intensity: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "edited", value_parser = parse_mode)]
    branch: RenderMode,
}

#[derive(Args, Debug, Serialize)]
struct ServeArgs {
    #[command(flatten)]
    ckpt: CkptArgs,
    #[command(flatten)]
    length: LengthArgs,
    /// Bind address.
    #[arg(long, env = "VQNERF_ADDR", default_value = vqnerf_service::DEFAULT_ADDR)]
    addr: SocketAddr,
    /// Edit journal (default: `edits.jsonl` in the checkpoint).
    #[arg(long)]
    journal: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ExportArgs {
    #[command(flatten)]
    ckpt: CkptArgs,
    #[command(flatten)]
    length: LengthArgs,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n as usize).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
