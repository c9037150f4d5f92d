use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mambajscc::ChannelKind;

mod commands;

/// Exit statuses.
pub const EXIT_VERIFY: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "mambajscc", version, about = "Generalized state-space joint source-channel coding for images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ChannelArg {
    Awgn,
    Rayleigh,
    Identity,
}

impl From<ChannelArg> for ChannelKind {
    fn from(c: ChannelArg) -> Self {
        match c {
            ChannelArg::Awgn => ChannelKind::Awgn,
            ChannelArg::Rayleigh => ChannelKind::Rayleigh,
            ChannelArg::Identity => ChannelKind::Identity,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Toy,
    Full,
}

/// Flags shared by every subcommand that reads a run config.
#[derive(Args, Debug, Clone)]
struct Common {
    /// Run config (TOML); built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the property suites.
    Verify {
        /// oracle, gssm, superposition, receptive, roundtrip, channel, gradient, or all.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train (or resume) and write checkpoint and step log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Fixed training SNR in dB.
        #[arg(long, allow_hyphen_values = true)]
        snr: Option<f64>,
        #[arg(long, value_enum)]
        channel: Option<ChannelArg>,
        #[arg(long)]
        no_csi_rest: bool,
        /// Checkpoint path (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-SNR mean PSNR and MS-SSIM over the test set, as CSV.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate at this SNR only.
        #[arg(long, allow_hyphen_values = true)]
        snr: Option<f64>,
        #[arg(long, value_enum)]
        channel: Option<ChannelArg>,
        /// CSI fed to the model instead of the true SNR.
        #[arg(long, allow_hyphen_values = true)]
        inject_snr: Option<f64>,
        #[arg(long)]
        no_csi_rest: bool,
        #[arg(long)]
        trials: Option<usize>,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Send one PPM image through the model and channel.
    Transmit {
        #[command(flatten)]
        common: Common,
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 10.0, allow_hyphen_values = true)]
        snr: f64,
        #[arg(long, value_enum, default_value = "awgn")]
        channel: ChannelArg,
        #[arg(long, allow_hyphen_values = true)]
        inject_snr: Option<f64>,
        #[arg(long)]
        no_csi_rest: bool,
    },
    /// Per-module MACs and parameters with CSI refresh on and off.
    CountMacs {
        #[command(flatten)]
        common: Common,
        /// Use a built-in model instead of the config's.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Square input side, overriding the model's image size.
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic corpus as PPM files.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective run config as TOML.
    PrintConfig {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
