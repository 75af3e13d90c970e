//! Command-line front end: `fgs <subcommand> [--config c.toml] [--seed s]
//! [--out dir] [--threads n]`.

pub mod commands;
pub mod config;
pub mod io;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{Context, RunKind, RunRecord, VerifyOutput};
pub use config::RunConfig;
pub use io::Manifest;

use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "fgs",
    version,
    about = "Multiclass functionally graded structure design"
)]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides `paths.out_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true, env = "FGS_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Build the basis classes and their feasible isovalues.
    PrepareBasis,
    /// Sample blends and homogenize them into a training table.
    GenDataset,
    /// Fit the property surrogate.
    Train,
    /// Concurrent compliance design.
    Optimize,
    /// Two-stage displacement-profile matching.
    Match,
    /// Rebuild the last design at full resolution and re-solve it.
    Verify,
    /// Write the structure and class distribution images.
    Export {
        #[arg(long, default_value = "pgm")]
        format: String,
    },
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) | Error::Singular(_) => EXIT_NUMERICAL,
        _ => EXIT_INVALID,
    }
}

fn config_for(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.paths.out_dir = o.clone();
    }
    Ok(cfg)
}

/// Runs one parsed command; returns the manifest path.
pub fn execute(cli: &Cli) -> Result<PathBuf> {
    let ctx = Context::new(config_for(cli)?);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::PrepareBasis => commands::prepare_basis(&ctx),
        Command::GenDataset => commands::gen_dataset(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Optimize => commands::optimize(&ctx),
        Command::Match => commands::match_shape(&ctx),
        Command::Verify => commands::verify(&ctx),
        Command::Export { format } => commands::export(&ctx, format),
    })
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                EXIT_INVALID
            } else {
                EXIT_OK
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(_) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
