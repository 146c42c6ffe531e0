mod commands;
mod config;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Core(#[from] dargan::Error),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dargan", version, about = "Speech enhancement: GAN magnitude estimation with learned phase refinement")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set training.epochs=5`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize the train/validation/test corpus and its manifests.
    Mix,
    /// Train the GAN, then the phase denoiser when the config has a `phase` section.
    Train {
        /// Continue from the latest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Enhance a WAV file or every WAV file in a directory.
    Enhance {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Phase iterations; defaults to the trained denoiser's count, or 0 without weights.
        #[arg(long)]
        ppp_iters: Option<usize>,
        /// Trained phase denoiser. Without it, iterations run as plain Griffin-Lim.
        #[arg(long)]
        ppp_weights: Option<PathBuf>,
    },
    /// Score enhanced files against clean references.
    Evaluate {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        est: PathBuf,
        /// Noisy inputs, shown in the spectrogram plots when given.
        #[arg(long)]
        noisy: Option<PathBuf>,
        /// External PESQ command with `{clean}` and `{est}` placeholders.
        #[arg(long)]
        pesq_cmd: Option<String>,
        /// Write clean/noisy/enhanced spectrogram images per utterance.
        #[arg(long)]
        plots: bool,
        /// Report directory; defaults to `<run_dir>/evaluation`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Mix => commands::mix(&cfg),
        Command::Train { resume } => commands::train(&cfg, resume),
        Command::Enhance {
            input,
            out,
            ppp_iters,
            ppp_weights,
        } => commands::enhance(&cfg, &input, &out, ppp_iters, ppp_weights.as_deref()),
        Command::Evaluate {
            clean,
            est,
            noisy,
            pesq_cmd,
            plots,
            out,
        } => commands::evaluate(
            &cfg,
            &commands::EvaluateArgs {
                clean,
                est,
                noisy,
                pesq_cmd,
                plots,
                out,
            },
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code())
        }
    }
}
