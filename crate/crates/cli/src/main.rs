//! `nrfc`: train, compress, decode, and inspect plane-field scenes.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "nrfc",
    version,
    about = "Learned compression for plane-factorized radiance fields"
)]
struct Cli {
    /// Silence progress output on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

/// Training configuration: a named profile or a TOML file, plus overrides.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// TOML file; its `profile` key picks the base profile.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base profile when no config file is given: paper, desk, or tiny.
    #[arg(long, default_value = "desk")]
    pub profile: String,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct BackboneArgs {
    /// Codec backbone checkpoint (.ntar). Defaults to the cache under
    /// $NERFCODEC_CACHE when one exists.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Fall back to the seeded random backbone when no checkpoint is found.
    #[arg(long)]
    pub allow_random_backbone: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the procedural toy scene into a Blender-style dataset.
    ToyScene {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        views: Option<usize>,
        /// Image width and height in pixels.
        #[arg(long)]
        size: Option<usize>,
        /// Samples per ray for the ground-truth renders.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Fit the uncompressed field to a dataset.
    Pretrain {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Appearance plane channels.
        #[arg(long)]
        channels: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Training log (JSON lines).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Warmup, joint rate-distortion training, and QAT on a pretrained field.
    Compress {
        #[arg(long)]
        scene: PathBuf,
        /// Pretrained field checkpoint.
        #[arg(long)]
        field: PathBuf,
        /// Trained scene model checkpoint.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        backbone: BackboneArgs,
        #[arg(long)]
        log: Option<PathBuf>,
        /// Write the stage report here as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Entropy-code a trained scene model into a container.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        backbone: BackboneArgs,
    },
    /// Decode a container into a renderable archive.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        backbone: BackboneArgs,
    },
    /// Render PNG views of a container, decoded scene, model, or field.
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use the test cameras of this dataset; otherwise an orbit.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        views: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        backbone: BackboneArgs,
    },
    /// PSNR and SSIM against a dataset's test views.
    Eval {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        backbone: BackboneArgs,
    },
    /// Per-substream and per-component sizes of a container.
    Breakdown {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        backbone: BackboneArgs,
    },
    /// Radial spectra of a plane after warmups with the decoder head frozen
    /// and trained.
    Spectrum {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Plane slot, 0..6.
        #[arg(long, default_value_t = 3)]
        plane: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        backbone: BackboneArgs,
    },
    /// Compress at several rate points and tabulate bytes against PSNR.
    RdSweep {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pretrained field, reused for rate points with its channel count.
        #[arg(long)]
        field: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        lambda: Vec<f64>,
        /// Appearance channel counts; defaults to the profile's.
        #[arg(long, value_delimiter = ',')]
        channels: Vec<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        backbone: BackboneArgs,
    },
    /// Entropy-coder golden vectors and raw symbol-file coding.
    Conformance {
        #[command(subcommand)]
        action: ConformanceAction,
    },
    /// Write a seeded random backbone checkpoint.
    InitBackbone {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Subcommand, Debug)]
pub enum ConformanceAction {
    /// Emit golden vectors from the reference coder.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check the reference coder against a golden-vector file.
    Verify {
        #[arg(long)]
        vectors: PathBuf,
    },
    /// Encode a symbol file against a table file.
    Encode {
        #[arg(long)]
        tables: PathBuf,
        #[arg(long)]
        symbols: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a byte file; contexts come from the symbol file.
    Decode {
        #[arg(long)]
        tables: PathBuf,
        /// Symbol file whose `contexts` give the table of each symbol.
        #[arg(long)]
        contexts: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn report_error(kind: &str, message: &str) {
    eprintln!(
        "{}",
        serde_json::json!({ "error": kind, "message": message })
    );
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report_error("usage", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.quiet {
            log::LevelFilter::Warn
        } else {
            log::LevelFilter::Info
        })
        .format_timestamp(None)
        .format_target(false)
        .target(env_logger::Target::Stderr)
        .init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}
