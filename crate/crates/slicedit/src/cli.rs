//! Command-line interface.

use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use slicedit_core::denoisers::{embed_prompt, AnalyticDenoiser, Denoiser, GaussianPrior, ToyUnet};
use slicedit_core::experiments::{alpha_grid, slice_mse_experiment, synthetic_videos};
use slicedit_core::metrics::{embed_consistency, flow_error_with, FlowParams, RandomProjection};
use slicedit_core::pipeline::{edit, interpolate_frames, invert_any, plan_edit, EditConfig};
use slicedit_core::stvolume::{Space, VolumeDims};

use crate::config;
use crate::formats::{self, read_video, write_video};
use crate::record::save_record;
use crate::selfcheck;

/// A command-line mistake; exits with status 1 rather than 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(
    name = "slicedit",
    version,
    about = "Zero-shot text-guided video editing with space-time slices"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Option<Command>,

    #[command(flatten)]
    pub config: ConfigArgs,

    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
}

/// Editing configuration. Later sources win: defaults, `--config`, the
/// shorthand flags, then `--set`.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override one key, e.g. `--set gamma=0.5` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    /// Noise seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Deterministic DDIM inversion and sampling (eta = 0).
    #[arg(long, global = true)]
    pub ddim: bool,

    /// Frame branch only (gamma = 1).
    #[arg(long, global = true)]
    pub no_slices: bool,

    /// Disable attention injection.
    #[arg(long, global = true)]
    pub no_inject: bool,

    /// Average x-t slices into the slice branch.
    #[arg(long, global = true)]
    pub xt_slices: bool,

    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<EditConfig> {
        let mut c = EditConfig::default();
        if let Some(path) = &self.config {
            config::apply_file(&mut c, path)?;
        }
        if let Some(seed) = self.seed {
            c.seed = seed;
        }
        if self.ddim {
            c.eta = 0.0;
        }
        if self.no_slices {
            c.gamma = 1.0;
        }
        if self.no_inject {
            c.inject_fraction = 0.0;
        }
        if self.xt_slices {
            c.use_xt_slices = true;
        }
        for s in &self.set {
            config::apply_override(&mut c, s).map_err(|e| usage(format!("{e:#}")))?;
        }
        c.validate().map_err(|e| usage(e.to_string()))?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DenoiserKind {
    /// The toy U-Net with attention.
    Unet,
    /// The closed-form Gaussian denoiser (no attention, fast).
    Analytic,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = DenoiserKind::Unet)]
    pub denoiser: DenoiserKind,

    /// U-Net weights (STW1); seeded weights when absent.
    #[arg(long, value_name = "PATH")]
    pub weights: Option<PathBuf>,

    /// Seed for generated U-Net weights.
    #[arg(long, default_value_t = 0)]
    pub weight_seed: u64,
}

impl ModelArgs {
    fn build(&self, channels: usize) -> Result<Box<dyn Denoiser>> {
        Ok(match self.denoiser {
            DenoiserKind::Analytic => {
                Box::new(AnalyticDenoiser::new(GaussianPrior::ar1(0.9, 0.9)?))
            }
            DenoiserKind::Unet => match &self.weights {
                Some(path) => {
                    let tensors = formats::read_tensors(path)?;
                    Box::new(
                        ToyUnet::from_tensors(channels, tensors)
                            .with_context(|| format!("loading {}", path.display()))?,
                    )
                }
                None => Box::new(ToyUnet::seeded(channels, self.weight_seed)?),
            },
        })
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Edit a video from a source prompt to a target prompt.
    Edit(EditArgs),
    /// Invert a video and save the inversion record.
    Invert(InvertArgs),
    /// Print `flow_error,embed_consistency` for a source / edit pair.
    Metrics(MetricsArgs),
    /// Denoiser error on frames, y-t slices and permuted frames.
    Experiment(ExperimentArgs),
    /// Run quick internal consistency checks.
    Selfcheck,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    /// Input video: a frame directory or an STV1 file.
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    /// Output path, written in the input's format.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Source prompt describing the input.
    #[arg(long)]
    pub src: String,
    /// Target prompt.
    #[arg(long)]
    pub tar: String,
    /// Also save the inversion record (STW1).
    #[arg(long, value_name = "PATH")]
    pub save_record: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    /// Record path (STW1).
    #[arg(long, alias = "save-record", value_name = "PATH")]
    pub out: PathBuf,
    #[arg(long)]
    pub src: String,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Source video.
    pub source: PathBuf,
    /// Edited video.
    pub edited: PathBuf,
    /// Flow smoothness weight.
    #[arg(long, default_value_t = 10.0)]
    pub alpha: f64,
    /// Flow solver iterations.
    #[arg(long, default_value_t = 200)]
    pub iterations: usize,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Output directory for mse_report.csv.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub videos: usize,
    /// Frames, height and width of each synthetic video.
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub rho_space: f64,
    #[arg(long, default_value_t = 0.9)]
    pub rho_time: f64,
    /// Samples per noise level and input kind.
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    /// Number of evenly spaced noise levels.
    #[arg(long, default_value_t = 10)]
    pub levels: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let cfg = cli.config.resolve()?;
    if cli.config.print_config {
        print!("{}", config::to_toml(&cfg));
        return Ok(());
    }
    match cli.command {
        None => Err(usage("no subcommand given (try --help)")),
        Some(Command::Edit(a)) => run_edit(&a, &cfg),
        Some(Command::Invert(a)) => run_invert(&a, &cfg),
        Some(Command::Metrics(a)) => run_metrics(&a),
        Some(Command::Experiment(a)) => run_experiment(&a, &cfg),
        Some(Command::Selfcheck) => {
            if selfcheck::run_all(&mut std::io::stdout())? {
                Ok(())
            } else {
                anyhow::bail!("self-check failed")
            }
        }
    }
}

fn run_edit(a: &EditArgs, cfg: &EditConfig) -> Result<()> {
    let (video, format) = read_video(&a.input)?;
    let plan = plan_edit(video.n_frames(), cfg).map_err(|e| usage(e.to_string()))?;
    let den = a.model.build(video.channels())?;
    let start = Instant::now();
    let out = edit(den.as_ref(), &video, &a.src, &a.tar, cfg)?;
    eprintln!(
        "edited {} frames ({} working, {} sampling steps, {} injected) in {:.1}s",
        plan.input_frames,
        plan.working_frames,
        plan.sampling.executed,
        plan.sampling.injected,
        start.elapsed().as_secs_f64()
    );
    write_video(&a.out, &out.video, format)?;
    if let Some(path) = &a.save_record {
        save_record(path, &out.record)?;
    }
    Ok(())
}

fn run_invert(a: &InvertArgs, cfg: &EditConfig) -> Result<()> {
    let (video, _) = read_video(&a.input)?;
    let plan = plan_edit(video.n_frames(), cfg).map_err(|e| usage(e.to_string()))?;
    let latent = if video.space() == Space::Pixel {
        cfg.codec.encode(&video)?
    } else {
        video
    };
    let work = if plan.interpolated {
        interpolate_frames(&latent)?
    } else {
        latent
    };
    let den = a.model.build(work.channels())?;
    let start = Instant::now();
    let record = invert_any(den.as_ref(), &work, &embed_prompt(&a.src), cfg)?;
    eprintln!(
        "inverted {} frames over {} steps in {:.1}s ({} cached attention entries)",
        work.n_frames(),
        cfg.steps,
        start.elapsed().as_secs_f64(),
        record.cache.len()
    );
    save_record(&a.out, &record)?;
    Ok(())
}

fn run_metrics(a: &MetricsArgs) -> Result<()> {
    let (src, _) = read_video(&a.source)?;
    let (edited, _) = read_video(&a.edited)?;
    let params = FlowParams {
        alpha: a.alpha,
        iterations: a.iterations,
    };
    let fe = flow_error_with(&src, &edited, params)?;
    let ec = embed_consistency(&edited, &RandomProjection::default())?;
    println!("{fe},{ec}");
    Ok(())
}

fn run_experiment(a: &ExperimentArgs, cfg: &EditConfig) -> Result<()> {
    if a.levels == 0 {
        return Err(usage("--levels must be at least 1"));
    }
    let dims = VolumeDims::new(a.size, a.size, a.size, 1);
    let videos = synthetic_videos(a.videos, dims, a.rho_space, a.rho_time, cfg.seed)?;
    let den = AnalyticDenoiser::new(GaussianPrior::ar1(a.rho_space, a.rho_space)?);
    let alphas = alpha_grid(&cfg.schedule()?, a.levels);
    let report = slice_mse_experiment(&videos, &den, &alphas, a.samples, cfg.seed)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let path = a.out.join("mse_report.csv");
    std::fs::write(&path, report.to_csv())
        .with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {} rows to {}", report.rows.len(), path.display());
    Ok(())
}
