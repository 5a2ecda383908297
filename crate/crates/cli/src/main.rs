use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Low-light image enhancement: training, inference, evaluation, ablation
/// and profiling.
#[derive(Debug, Parser)]
#[command(name = "dimlight", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `schedule.total_epochs=2`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Replace the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on the configured dataset, writing a loss log, checkpoints and
    /// a summary to the output directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (default: `out_dir` from the configuration).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long, value_name = "PATH")]
        ckpt: Option<PathBuf>,
    },
    /// Enhance one image or every image in a directory.
    Enhance {
        /// Input image or directory.
        input: PathBuf,
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Also write the reflectance (`_R.png`), illumination (`_I.png`),
        /// attended illumination (`_I_hat.png`) and enhanced illumination
        /// (`_I_bar.png`) of each input.
        #[arg(long)]
        dump_intermediates: bool,
        /// Check the checkpoint against this configuration's model section.
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a checkpoint on the test split; prints mean PSNR/SSIM and writes
    /// a per-image report.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "PATH", required_unless_present = "identity")]
        ckpt: Option<PathBuf>,
        /// Score the ground truth against itself instead of a model.
        #[arg(long, conflicts_with = "ckpt")]
        identity: bool,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Retrain with each component removed and tabulate the scores.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated variants (default: all six).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Per-layer parameter and FLOP counts.
    Info {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Take the model configuration from a checkpoint.
        #[arg(long, value_name = "PATH")]
        ckpt: Option<PathBuf>,
        #[arg(long, value_name = "WxH", default_value = "224x224")]
        resolution: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
