//! Command-line front end.

use clap::{ArgAction, Parser, Subcommand};

use crate::config::{RunConfig, Settings, Task};
use crate::error::Result;
use crate::tasks::{run, RunSummary};

#[derive(Debug, Parser)]
#[command(name = "fcppn", version, about = "Fit coordinate networks to images and render them")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one target pixel-aligned through a perceptual content loss.
    Reconstruct(Settings),
    /// Match the feature statistics of one texture.
    Texture(Settings),
    /// Fit two targets with one network conditioned on z, then write frames.
    Interpolate(Settings),
    /// Render a checkpoint at any resolution.
    Render(Settings),
    /// Finite-difference check of the training objective.
    Gradcheck(Settings),
}

impl Command {
    pub fn split(self) -> (Task, Settings) {
        match self {
            Command::Reconstruct(s) => (Task::Reconstruct, s),
            Command::Texture(s) => (Task::Texture, s),
            Command::Interpolate(s) => (Task::Interpolate, s),
            Command::Render(s) => (Task::Render, s),
            Command::Gradcheck(s) => (Task::Gradcheck, s),
        }
    }
}

pub fn log_level(verbose: u8) -> log::LevelFilter {
    match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    }
}

/// Merges the config file, resolves defaults and runs the task.
pub fn execute(command: Command) -> Result<RunSummary> {
    let (task, settings) = command.split();
    let settings = settings.with_file()?;
    let config = RunConfig::resolve(task, &settings)?;
    config.validate()?;
    run(&config, &settings)
}

/// Parses `args`, runs, and returns the process exit status.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(log_level(cli.verbose))
        .parse_default_env()
        .try_init();
    match execute(cli.command) {
        Ok(summary) => {
            for f in &summary.files {
                log::info!("wrote {}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
