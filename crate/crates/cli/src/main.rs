//! `xovd`: build galleries and descriptor stores, detect, evaluate and sweep.

mod commands;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use failure::{ExitKind, Failure, OrExit};

#[derive(Debug, Parser)]
#[command(name = "xovd", version, about = "Training-free open-vocabulary X-ray detection toolkit")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, short, global = true, default_value = "xovd.toml")]
    pub config: PathBuf,

    /// Worker threads; results do not depend on this.
    #[arg(long, short, global = true)]
    pub jobs: Option<usize>,

    /// Validate the configuration and print the plan without running anything.
    #[arg(long, global = true)]
    pub dry_run: bool,

    #[command(flatten)]
    pub overrides: Overrides,

    #[command(subcommand)]
    pub command: Command,
}

/// Flags that override values from the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Gallery samples per class.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Consistency margin.
    #[arg(long, global = true)]
    pub sigma: Option<f64>,
    /// Web filter threshold.
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// In-house fraction of the vocabulary, in [0, 1].
    #[arg(long, global = true)]
    pub composition: Option<f64>,
    /// Seeds, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Root directory for run artifacts.
    #[arg(long, global = true)]
    pub runs_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic micro-benchmark and a matching config.
    MakeFixtures {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Build the material database from the in-house index (or the fallback table).
    BuildMaterials {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a descriptor store for the vocabulary, or extend an existing one.
    BuildDescriptors {
        /// Keep going when some classes yield no descriptor.
        #[arg(long)]
        allow_partial: bool,
        /// Existing store to extend with the vocabulary classes it lacks.
        #[arg(long)]
        extend: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run detection over images and write JSON-lines detections.
    Detect {
        /// Store to use instead of `paths.store`.
        #[arg(long)]
        store: Option<PathBuf>,
        /// Manifest of images to process.
        #[arg(long, conflicts_with = "images")]
        manifest: Option<PathBuf>,
        /// Image files to process.
        images: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a transfer run (or an existing detections file) on the test split.
    Evaluate {
        /// Score these detections instead of running the pipeline.
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Composition, gallery-size and consistency-margin sweeps.
    Sweep {
        #[arg(long, value_enum, default_value_t = SweepKind::All)]
        what: SweepKind,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Composition,
    K,
    Sigma,
    All,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            if let Some(raw) = &f.payload {
                eprintln!("--- raw payload ---\n{raw}\n--- end payload ---");
            }
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Failure::new(ExitKind::Config, anyhow::anyhow!("--jobs must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().or_exit(ExitKind::Config)?;
    }
    commands::dispatch(cli)
}
