//! The `steerlab` command line: run configuration, output directories with
//! digest manifests, SVG figures and the five commands.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod pipeline;
pub mod svg;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::{Command, Ctx};
use crate::config::RunConfig;
use crate::error::{exit, CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "steerlab", version, about = "Persona features in a toy game-playing transformer")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Play batches of games between two policies.
    Simulate(Common),
    /// Train the toy model and a sparse autoencoder on its residual stream.
    Train(Common),
    /// Screen every active SAE feature for its effect on defection.
    Screen(Common),
    /// Activation density and top contexts for one feature.
    Dashboard(Common),
    /// Steering-strength sweep of one feature over all short histories.
    Sweep(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, env = "STEERLAB_WORKERS")]
    workers: Option<usize>,
    /// Output directory; must not exist or be empty.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Sub {
    fn split(self) -> (Command, Common) {
        match self {
            Sub::Simulate(c) => (Command::Simulate, c),
            Sub::Train(c) => (Command::Train, c),
            Sub::Screen(c) => (Command::Screen, c),
            Sub::Dashboard(c) => (Command::Dashboard, c),
            Sub::Sweep(c) => (Command::Sweep, c),
        }
    }
}

fn execute(command: Command, args: Common) -> CliResult<PathBuf> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let workers = match args.workers {
        Some(0) => return Err(CliError::input("workers must be at least 1")),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let out_dir = output::resolve_out_dir(args.out, &cfg.hash())?;
    let ctx = commands::execute(command, Ctx::new(command, cfg, workers, out_dir))?;
    Ok(ctx.out_dir)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::INPUT } else { exit::OK };
        }
    };
    let (command, args) = cli.command.split();
    match execute(command, args) {
        Ok(dir) => {
            println!("{}", dir.display());
            exit::OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
