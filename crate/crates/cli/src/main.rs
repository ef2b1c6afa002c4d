//! `mcqtok`: command-line front end for the multi-codebook tokenizer
//! toolkit.

mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mcqtok::Error;

#[derive(Parser, Debug)]
#[command(
    name = "mcqtok",
    version,
    about = "Multi-codebook quantization and toy tokenizer experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub(crate) enum SynthKind {
    Shapes,
    Vectors,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub(crate) enum SchemeArg {
    Vq,
    Mcq,
    Rq,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub(crate) enum SplitArg {
    Heldout,
    Train,
    All,
}

#[derive(Subcommand, Debug)]
pub(crate) enum Command {
    /// Render labeled shape images or draw Gaussian vectors.
    SynthData {
        #[arg(long, value_enum, default_value_t = SynthKind::Shapes)]
        kind: SynthKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Shapes: number of classes (2 to 16).
        #[arg(long, default_value_t = 8)]
        num_classes: usize,
        /// Vectors: dimension.
        #[arg(long, default_value_t = 64)]
        dim: usize,
        /// Vectors: mixture components (0 for a single isotropic Gaussian).
        #[arg(long, default_value_t = 0)]
        components: usize,
        /// Vectors: standard deviation of mixture centers.
        #[arg(long, default_value_t = 4.0)]
        spread: f64,
        /// Output directory (shapes) or UTKV file (vectors).
        #[arg(long)]
        out: std::path::PathBuf,
    },
    /// Fit VQ, MCQ or RQ codebooks to a UTKV vector file by k-means.
    FitCodebooks {
        #[arg(long)]
        input: std::path::PathBuf,
        #[arg(long, value_enum, default_value_t = SchemeArg::Mcq)]
        scheme: SchemeArg,
        /// Sub-codebooks (MCQ) or levels (RQ); must be 1 for VQ.
        #[arg(long, default_value_t = 4)]
        sub_codebooks: usize,
        #[arg(long, default_value_t = 256)]
        codebook_size: usize,
        /// RQ: fit a separate codebook per level instead of one shared one.
        #[arg(long, default_value_t = false)]
        per_level: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long)]
        out: std::path::PathBuf,
    },
    /// Quantize every vector of a UTKV file; writes row,index_0..,error CSV.
    Quantize {
        #[arg(long)]
        codebooks: std::path::PathBuf,
        #[arg(long)]
        input: std::path::PathBuf,
        #[arg(long)]
        out: std::path::PathBuf,
    },
    /// Fit and measure several quantizer shapes over several seeds.
    ///
    /// Vectors are split 90/10 by index hash; errors are measured on the
    /// 10% part.
    Compare {
        #[arg(long)]
        input: std::path::PathBuf,
        /// Comma-separated `scheme:NxK` list (`rq-perlevel:NxK` for
        /// per-level RQ).
        #[arg(long, default_value = "mcq:8x256,rq:8x256")]
        configs: String,
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        /// Run everything on the calling thread.
        #[arg(long, default_value_t = false)]
        sequential: bool,
        #[arg(long)]
        out: std::path::PathBuf,
    },
    /// Train the toy tokenizer. Extra `--section.key=value` arguments
    /// override the config file.
    Train {
        /// TOML config; omitted keys take their defaults.
        #[arg(long)]
        config: Option<std::path::PathBuf>,
        #[arg(long)]
        out: std::path::PathBuf,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<std::path::PathBuf>,
        /// Print the effective config and exit.
        #[arg(long, default_value_t = false)]
        print_config: bool,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint: PSNR, zero-shot accuracy, codebook usage.
    Eval {
        #[arg(long)]
        checkpoint: std::path::PathBuf,
        /// Dataset directory; defaults to the dataset in the checkpoint's
        /// config.
        #[arg(long)]
        data: Option<std::path::PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Heldout)]
        split: SplitArg,
        #[arg(long)]
        out: std::path::PathBuf,
    },
    /// Train each ablation stage per seed and tabulate held-out accuracy.
    /// Extra `--section.key=value` arguments override the config file.
    Roadmap {
        #[arg(long)]
        config: Option<std::path::PathBuf>,
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long)]
        out: std::path::PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
        overrides: Vec<String>,
    },
    /// Print a human-readable summary of a checkpoint or codebook file.
    Inspect {
        #[arg(
            long,
            conflicts_with = "codebooks",
            required_unless_present = "codebooks"
        )]
        checkpoint: Option<std::path::PathBuf>,
        #[arg(long)]
        codebooks: Option<std::path::PathBuf>,
        /// With --codebooks: also recompute quantization errors over this
        /// UTKV file.
        #[arg(long, requires = "codebooks")]
        input: Option<std::path::PathBuf>,
    },
}

/// Exit status for a library error.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidParameter(_) => 1,
        Error::Divergence { .. } | Error::NonFinite => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
