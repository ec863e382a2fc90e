//! `led`: synthesize, pre-train, fine-tune, deploy and evaluate RAW denoisers.

// `!(x > lo)` rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use led_core::camera::SelectionMode;
use led_core::repnr::CsaInit;

use crate::commands::FinetuneArgs;
use crate::config::{parse_list, RunConfig};
pub use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "led", version, about = "Low-light RAW denoising without per-camera noise calibration")]
struct Cli {
    /// Master seed; falls back to LED_SEED, then 0.
    #[arg(long, global = true, env = "LED_SEED", default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 picks the rayon default).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the resolved configuration (defaults, file, overrides).
    Config,
    /// Sample virtual cameras from the parameter space (JSON lines).
    GenCameras {
        #[arg(long)]
        m: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write procedural clean Bayer frames and their manifest.
    GenScenes {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize noisy frames for every clean frame and ratio.
    Synth {
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        clean: PathBuf,
        #[arg(long, default_value = "100,250,300")]
        ratios: String,
        /// Add the out-of-model fixed pattern and banding.
        #[arg(long)]
        oom: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train a multi-branch network on synthetic pairs.
    Pretrain {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration loss log (CSV).
        #[arg(long)]
        progress: Option<PathBuf>,
    },
    /// Fine-tune a pre-trained checkpoint on a few real pairs.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// CSA initialization: average or unit.
        #[arg(long)]
        init: Option<String>,
        /// Pair selection: spread or similar.
        #[arg(long)]
        select: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        progress: Option<PathBuf>,
    },
    /// Fuse all branches into plain convolutions.
    Deploy {
        #[arg(long)]
        ckpt: PathBuf,
        /// Deploy one pre-training branch instead of a fine-tuned network.
        #[arg(long)]
        branch: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Denoise one noisy Bayer frame.
    Denoise {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        ratio: f64,
        #[arg(long)]
        branch: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR and SSIM per pair and per ratio (CSV).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// Restrict to these ratios (comma separated).
        #[arg(long)]
        ratios: Option<String>,
        #[arg(long)]
        branch: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the log-linear gain lines per camera (CSV).
    GainLine {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn ratios_arg(text: &str) -> Result<Vec<f64>, CliError> {
    parse_list(text).map_err(|e| CliError::Usage(format!("ratios: {e}")))
}

fn parse_or<T: std::str::FromStr<Err = led_core::LedError>>(
    arg: Option<&str>,
    fallback: impl FnOnce() -> Result<T, CliError>,
) -> Result<T, CliError> {
    match arg {
        Some(s) => s.parse().map_err(|e: led_core::LedError| CliError::Usage(e.to_string())),
        None => fallback(),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot build thread pool: {e}")))?;
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Command::Config = cli.command {
        print!("{}", cfg.render());
        return Ok(());
    }
    eprintln!("# seed = {}\n{}", cli.seed, cfg.render());
    let seed = cli.seed;
    match cli.command {
        Command::Config => Ok(()),
        Command::GenCameras { m, out } => commands::gen_cameras(&cfg, m, &out),
        Command::GenScenes { count, height, width, out } => {
            commands::gen_scenes(count, height, width, seed, &out)
        }
        Command::Synth { cameras, clean, ratios, oom, out } => {
            commands::synth(&cfg, &cameras, &clean, &ratios_arg(&ratios)?, oom, seed, &out)
        }
        Command::Pretrain { clean, cameras, out, progress } => {
            commands::run_pretrain(&cfg, &clean, &cameras, seed, &out, progress.as_deref())
        }
        Command::Finetune { ckpt, pairs, init, select, out, progress } => {
            let init: CsaInit = parse_or(init.as_deref(), || cfg.csa_init())?;
            let select: SelectionMode = parse_or(select.as_deref(), || cfg.selection())?;
            commands::run_finetune(
                &cfg,
                FinetuneArgs {
                    ckpt: &ckpt,
                    pairs: &pairs,
                    init,
                    select,
                    seed,
                    out: &out,
                    progress: progress.as_deref(),
                },
            )
        }
        Command::Deploy { ckpt, branch, out } => commands::run_deploy(&ckpt, branch, &out),
        Command::Denoise { ckpt, input, ratio, branch, out } => {
            commands::run_denoise(&cfg, &ckpt, &input, ratio, branch, &out)
        }
        Command::Eval { ckpt, pairs, ratios, branch, out } => {
            let ratios = ratios.as_deref().map(ratios_arg).transpose()?.unwrap_or_default();
            commands::run_eval(&ckpt, &pairs, &ratios, branch, &out)
        }
        Command::GainLine { pairs, out } => commands::run_gain_line(&pairs, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
