mod dashboard;
mod screen;
mod simulate;
mod sweep;
mod train;

use std::path::PathBuf;

use crate::config::RunConfig;
use crate::error::CliResult;
use crate::output::RunOutput;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Train,
    Screen,
    Dashboard,
    Sweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Train => "train",
            Command::Screen => "screen",
            Command::Dashboard => "dashboard",
            Command::Sweep => "sweep",
        }
    }
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub workers: usize,
    pub out_dir: PathBuf,
    pub run: RunOutput,
}

impl Ctx {
    pub fn new(command: Command, cfg: RunConfig, workers: usize, out_dir: PathBuf) -> Self {
        let run = RunOutput::new(command.name(), cfg.clone(), workers);
        Ctx {
            cfg,
            workers,
            out_dir,
            run,
        }
    }

    pub fn pool(&self) -> CliResult<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers.max(1))
            .build()
            .map_err(|e| crate::error::CliError::input(format!("thread pool: {e}")))
    }
}

/// Runs `command` and writes its outputs. Commands that fail part-way may
/// still write what they have before returning the error.
pub fn execute(command: Command, mut ctx: Ctx) -> CliResult<Ctx> {
    match command {
        Command::Simulate => simulate::run(&mut ctx)?,
        Command::Train => train::run(&mut ctx)?,
        Command::Screen => screen::run(&mut ctx)?,
        Command::Dashboard => dashboard::run(&mut ctx)?,
        Command::Sweep => sweep::run(&mut ctx)?,
    }
    ctx.run.write(&ctx.out_dir)?;
    Ok(ctx)
}
