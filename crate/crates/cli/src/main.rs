mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

/// Skinned body model fitting and mesh-bound Gaussian avatars.
#[derive(Debug, Parser)]
#[command(name = "skinsplat", version)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores, or the config value).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the procedural toy quadruped as a model asset.
    MakeToyModel {
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an annotated synthetic clip.
    GenData(GenDataArgs),
    /// Refine per-frame parameters against a clip's keypoints and masks.
    FitMotion(FitMotionArgs),
    /// Fit a Gaussian avatar to posed frames of a clip.
    FitAvatar(FitAvatarArgs),
    /// Estimate motion, fit or load an avatar and render it along the clip.
    Animate(AnimateArgs),
    /// Render a pose sequence as a textured mesh or with an avatar.
    Render(RenderArgs),
    /// Score predicted parameters (and optional renders) against a clip.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub card: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    /// Procedural gait: walk, trot or idle-sway.
    #[arg(long, default_value = "walk", conflicts_with = "motion")]
    pub gait: String,
    /// Gait amplitude multiplier.
    #[arg(long, default_value_t = 1.0)]
    pub amplitude: f64,
    /// Imported pose sequence driving the clip instead of a gait.
    #[arg(long)]
    pub motion: Option<PathBuf>,
    /// Texture id (default: the seed).
    #[arg(long)]
    pub texture: Option<u64>,
    /// Fixed trajectory kind instead of a sampled one: fix, dolly or orbit.
    #[arg(long)]
    pub trajectory: Option<String>,
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long)]
    pub height: Option<u32>,
    #[arg(long)]
    pub fps: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    /// Initial pose sequence; without it the clip's ground truth plus noise
    /// is used.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Axis-angle noise of the noisy-oracle initialization.
    #[arg(long)]
    pub sigma_theta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitMotionArgs {
    #[arg(long)]
    pub card: PathBuf,
    #[arg(long)]
    pub clip: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub init: InitArgs,
    /// Iterations of every stage.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub mask_downsample: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitAvatarArgs {
    #[arg(long)]
    pub card: PathBuf,
    #[arg(long)]
    pub clip: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Pose sequence the frames are posed with (default: the clip's).
    #[arg(long)]
    pub poses: Option<PathBuf>,
    /// Frames used as views (default: every frame).
    #[arg(long, value_delimiter = ',')]
    pub frames: Vec<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AnimateArgs {
    #[arg(long)]
    pub card: PathBuf,
    #[arg(long)]
    pub clip: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub init: InitArgs,
    /// Refine the initial motion before animating.
    #[arg(long)]
    pub refine: bool,
    /// Previously fitted avatar; without it one is fitted on the keyframes.
    #[arg(long)]
    pub avatar: Option<PathBuf>,
    /// Keyframes the avatar is fitted on (default: every fourth frame).
    #[arg(long, value_delimiter = ',')]
    pub keyframes: Vec<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub card: PathBuf,
    /// Pose sequence, or a clip to re-render its ground truth.
    #[arg(long)]
    pub poses: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Render this avatar instead of the textured mesh.
    #[arg(long)]
    pub avatar: Option<PathBuf>,
    /// Texture id of the mesh render.
    #[arg(long, default_value_t = 0)]
    pub texture: u64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub card: PathBuf,
    #[arg(long)]
    pub clip: PathBuf,
    /// Predicted pose sequence (a clip directory scores its ground truth).
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of rendered frames `000000.png, ...` scored with PSNR/SSIM.
    #[arg(long)]
    pub renders: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<skinsplat::Error>()) {
        Some(e) if e.is_numerical() => EXIT_NUMERICAL,
        Some(skinsplat::Error::Config(_)) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global()?;
    }
    match cli.command {
        Command::MakeToyModel { out } => commands::make_toy_model(&cfg, &out),
        Command::GenData(a) => commands::gen_data(&mut cfg, &a),
        Command::FitMotion(a) => commands::fit_motion(&mut cfg, &a),
        Command::FitAvatar(a) => commands::fit_avatar(&mut cfg, &a),
        Command::Animate(a) => commands::animate(&mut cfg, &a),
        Command::Render(a) => commands::render(&cfg, &a),
        Command::Evaluate(a) => commands::evaluate(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
