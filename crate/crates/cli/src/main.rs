mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use grtn_core::Error;

/// Causal single-frame-delay video denoiser.
#[derive(Parser, Debug)]
#[command(name = "grtn", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Plain-text `key = value` configuration file (`#` starts a comment).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives bit-exact reproducible runs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory receiving every output file.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write a checkpoint plus loss curve.
    Train {
        /// Continue from this checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total iterations (defaults to the configured count).
        #[arg(long)]
        until: Option<usize>,
    },
    /// Denoise a directory of PGM/PPM frames.
    Denoise {
        /// Frame directory, read in file-name order.
        #[arg(long = "in")]
        input: PathBuf,
        /// Noise level on the 0-255 scale.
        #[arg(long)]
        sigma: f64,
        /// Defaults to `<out>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// The input is already noisy; score against `--clean` if given.
        #[arg(long)]
        noisy: bool,
        /// Clean reference frames for an already-noisy input.
        #[arg(long)]
        clean: Option<PathBuf>,
    },
    /// Score a checkpoint on sequences at several noise levels.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Clean frame directories; synthetic sequences are used when omitted.
        #[arg(long = "in")]
        inputs: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "10,20,30,40,50")]
        sigmas: Vec<f64>,
        /// Frames per synthetic sequence.
        #[arg(long, default_value_t = 8)]
        frames: usize,
        /// Side of the synthetic frames.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train every variant with the same schedule and compare them.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "full,no_gates,dot_product,no_ortho")]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "25,50")]
        sigmas: Vec<f64>,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Compare clean-vs-noisy attention rows of both attention kinds.
    ProbeAttn {
        #[arg(long, default_value_t = 50.0)]
        sigma: f64,
        #[arg(long, value_delimiter = ',', default_value = "8")]
        window: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Side of the pixel patch forming one token.
        #[arg(long, default_value_t = 4)]
        token_size: usize,
        /// Synthetic texture source.
        #[arg(long, default_value = "textured_pan")]
        source: String,
    },
    /// Verify every analytic gradient against finite differences.
    Gradcheck,
    /// Report learnable parameter counts for a configuration or checkpoint.
    Params {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Exit status for a failed command.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        e if e.is_numerical() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
