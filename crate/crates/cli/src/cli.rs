use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use refine_core::synth::SynthConfig;

use crate::convert::{cmd_convert, ConvertArgs, InputFormat};
use crate::error::{CliError, CliResult};
use crate::eval::{cmd_eval, EvalArgs, EvalOptions, Task, ZeroShotInputs};
use crate::files::DataPaths;
use crate::sweep::{cmd_sweep, SweepArgs, SweepParam};
use crate::synth::{cmd_synth, SynthArgs};
use crate::train::{cmd_train, TrainArgs};

#[derive(Debug, Parser)]
#[command(name = "refine-kit", version, about = "Post-pre-training of refinement heads over cached dual-encoder embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train image and text heads from a JSON run config.
    Train(TrainCmd),
    /// Evaluate heads (or the frozen features) on a paired split.
    Eval(EvalCmd),
    /// Generate synthetic paired embeddings with a modality gap.
    Synth(SynthCmd),
    /// Train and evaluate once per value of one parameter; emits CSV.
    Sweep(SweepCmd),
    /// Convert CSV, raw f32 or .npy dumps to EMB1.
    Convert(ConvertCmd),
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides "output" in the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Apply RaFA to the pre-normalization residual.
    #[arg(long)]
    pub rafa_prenorm: bool,
}

#[derive(Debug, Args)]
pub struct EvalCmd {
    /// Directory holding image_head.rhd and text_head.rhd; frozen features when omitted.
    #[arg(long)]
    pub heads: Option<PathBuf>,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub texts: PathBuf,
    /// Pair manifest; rows pair by position when omitted.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub caption_index: usize,
    #[arg(long, value_delimiter = ',', default_value = "metrics,retrieval")]
    pub tasks: Vec<Task>,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub ks: Vec<usize>,
    /// Class prompt embeddings (EMB1, ids are class labels).
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// JSON object mapping image id to class label.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// CSV destination for the pca task.
    #[arg(long)]
    pub pca_out: Option<PathBuf>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print a human-readable table.
    #[arg(long)]
    pub pretty: bool,
}

#[derive(Debug, Args)]
pub struct SynthCmd {
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    #[arg(long, default_value_t = 0.5)]
    pub gap: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of latent classes (0 for none); enables prompts and labels.
    #[arg(long, default_value_t = 0)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long)]
    pub out_prefix: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepCmd {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub param: SweepParam,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub ks: Vec<usize>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Parallel runs (capped by REFINE_KIT_THREADS).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ConvertCmd {
    #[arg(long)]
    pub input: PathBuf,
    /// csv, f32 or npy; guessed from the extension when omitted.
    #[arg(long)]
    pub format: Option<InputFormat>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// One id per line, for f32 and npy inputs.
    #[arg(long)]
    pub ids: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(c) => {
            let dir = cmd_train(&TrainArgs {
                config: c.config,
                out: c.out,
                rafa_prenorm: c.rafa_prenorm,
            })?;
            log::info!("wrote {}", dir.display());
        }
        Command::Eval(c) => {
            let zeroshot = match (c.prompts, c.labels) {
                (Some(prompts), Some(labels)) => Some(ZeroShotInputs { prompts, labels }),
                (None, None) => None,
                _ => return Err(CliError::config("--prompts and --labels go together")),
            };
            if c.ks.is_empty() || c.ks.contains(&0) {
                return Err(CliError::config("--ks must list positive integers"));
            }
            cmd_eval(&EvalArgs {
                heads: c.heads,
                data: DataPaths {
                    images: c.images,
                    texts: c.texts,
                    manifest: c.manifest,
                    caption_index: c.caption_index,
                },
                options: EvalOptions {
                    tasks: c.tasks,
                    ks: c.ks,
                    zeroshot,
                    pca_out: c.pca_out,
                },
                out: c.out,
                pretty: c.pretty,
            })?;
        }
        Command::Synth(c) => {
            if !(c.train_fraction > 0.0 && c.train_fraction < 1.0) {
                return Err(CliError::config("--train-fraction must be in (0, 1)"));
            }
            let out = cmd_synth(&SynthArgs {
                config: SynthConfig {
                    n: c.n,
                    dim: c.d,
                    gap: c.gap,
                    noise: c.noise,
                    seed: c.seed,
                    classes: c.classes,
                    train_fraction: c.train_fraction,
                    ..SynthConfig::default()
                },
                out_prefix: c.out_prefix,
            })?;
            for (role, path) in out {
                println!("{role}\t{}", path.display());
            }
        }
        Command::Sweep(c) => {
            cmd_sweep(&SweepArgs {
                config: c.config,
                param: c.param,
                values: c.values,
                ks: c.ks,
                out: c.out,
                jobs: c.jobs,
            })?;
        }
        Command::Convert(c) => {
            let t = cmd_convert(&ConvertArgs {
                input: c.input,
                format: c.format,
                dim: c.dim,
                ids: c.ids,
                out: c.out,
            })?;
            log::info!("converted {} rows of dimension {}", t.count(), t.dim());
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
