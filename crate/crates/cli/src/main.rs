//! `finv`: batch driver for benchmark synthesis, prior pretraining,
//! reconstruction, evaluation, ablation and mesh export.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use finv::evalkit::Variant;
use finv::FinvError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] FinvError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 validation, 3 input/output, 4 numerical failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                e if e.is_numerical() => 4,
                FinvError::MissingFile(_) | FinvError::Malformed { .. } | FinvError::Io { .. } => 3,
                _ => 2,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "finv",
    version,
    about = "Filtering inversion of a voxel-field generative prior"
)]
pub struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set finv.population_size=4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root directory all outputs and relative inputs resolve against.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Replace an existing output directory or file.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the benchmark sequences.
    Synth,
    /// Train the prior on procedural shapes.
    Pretrain,
    /// Reconstruct from the first k frames of a sequence.
    Reconstruct {
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value = "full", value_parser = parse_variant)]
        variant: Variant,
        /// Run directory name under the runs path.
        #[arg(long)]
        name: Option<String>,
    },
    /// Score run directories on their sequences' evaluation frames.
    Evaluate {
        /// Run directories; all runs under the runs path when omitted.
        runs: Vec<PathBuf>,
    },
    /// Compare variants over the whole benchmark.
    Ablate,
    /// Write the isosurface of a run as OBJ.
    ExportMesh {
        #[arg(long)]
        run: PathBuf,
        /// Output file; `<reports>/meshes/<run>.obj` by default.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).map_err(|e| e.to_string())
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Validation("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(e.to_string()))?;
    }
    let mut config = config::RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.validate()?;
    }
    let ctx = commands::Context {
        root: cli.out,
        force: cli.force,
        config,
    };
    match cli.command {
        Command::Synth => commands::synth(&ctx),
        Command::Pretrain => commands::pretrain(&ctx),
        Command::Reconstruct {
            sequence,
            k,
            variant,
            name,
        } => commands::reconstruct(&ctx, &sequence, k, variant, name.as_deref()),
        Command::Evaluate { runs } => commands::evaluate(&ctx, &runs),
        Command::Ablate => commands::ablate(&ctx),
        Command::ExportMesh { run, output } => commands::export_mesh(&ctx, &run, output.as_deref()),
    }
}

/// `path` if absolute, else `root/path`.
pub fn resolve(root: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        root.join(path)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
