//! `drpca`: synthetic data, registration, energy landscapes and landmark evaluation.

mod commands;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use drpca::io::{parse_registration_config, parse_synth_config, SynthConfig};
use drpca::multilevel::RegistrationConfig;
use drpca::synth::{DeformationKind, LandscapeMetric, DEFAULT_STEPS};
use log::LevelFilter;

use commands::Destination;
use manifest::Invocation;

#[derive(Debug, Parser)]
#[command(
    name = "drpca",
    version,
    about = "Groupwise image registration with the δ-RPCA dissimilarity"
)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// off, error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the textured-ellipse benchmark with its landmarks.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Register a group of graymaps.
    Register {
        /// Image paths or glob patterns; matches are sorted.
        #[arg(required = true)]
        images: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep a dissimilarity over a prescribed deformation family.
    Landscape {
        #[arg(required = true)]
        images: Vec<String>,
        #[arg(long)]
        metric: LandscapeMetric,
        #[arg(long)]
        kind: DeformationKind,
        #[arg(long, default_value_t = DEFAULT_STEPS)]
        k: usize,
        /// Output table.
        #[arg(long)]
        out: PathBuf,
    },
    /// Landmark accuracy before and after applying registration fields.
    EvalLandmarks {
        landmarks: PathBuf,
        fields: PathBuf,
        /// Output table.
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeat a recorded run and verify that every output is bit-identical.
    Rerun {
        manifest: PathBuf,
        /// Output directory for the repeated run.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Numeric(String),
    Io(String),
    Mismatch(String),
}

impl Failure {
    pub fn io(context: impl Into<String>, e: std::io::Error) -> Self {
        Failure::Io(format!("{}: {e}", context.into()))
    }

    fn exit_code(&self) -> u8 {
        match self {
            Failure::Io(_) | Failure::Mismatch(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Numeric(m) | Failure::Io(m) | Failure::Mismatch(m) => m,
        }
    }
}

fn read_config(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::io(format!("reading {}", path.display()), e))
}

fn registration_config(path: Option<&Path>) -> Result<RegistrationConfig, Failure> {
    match path {
        Some(p) => Ok(parse_registration_config(&read_config(p)?)?),
        None => Ok(RegistrationConfig::default()),
    }
}

fn synth_config(path: Option<&Path>) -> Result<SynthConfig, Failure> {
    match path {
        Some(p) => Ok(parse_synth_config(&read_config(p)?)?),
        None => Ok(SynthConfig::default()),
    }
}

fn execute(command: Command) -> Result<(), Failure> {
    let (invocation, dest) = match command {
        Command::Synth { config, out } => (
            Invocation::Synth {
                config: synth_config(config.as_deref())?,
            },
            Destination::directory(&out),
        ),
        Command::Register { images, config, out } => (
            Invocation::Register {
                images: commands::expand_images(&images)?,
                config: registration_config(config.as_deref())?,
            },
            Destination::directory(&out),
        ),
        Command::Landscape {
            images,
            metric,
            kind,
            k,
            out,
        } => (
            Invocation::Landscape {
                images: commands::expand_images(&images)?,
                metric,
                kind,
                k,
            },
            Destination::table(&out)?,
        ),
        Command::EvalLandmarks { landmarks, fields, out } => (
            Invocation::EvalLandmarks {
                landmarks: commands::absolute(&landmarks)?,
                fields: commands::absolute(&fields)?,
            },
            Destination::table(&out)?,
        ),
        Command::Rerun { manifest, out } => return commands::rerun(&manifest, &out),
    };
    let manifest = commands::run(&invocation, &dest)?;
    for t in &manifest.timings {
        log::info!("{}: {:.3} s", t.phase, t.seconds);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
