//! The `sqi` command: `ask`, `eval` and `cache`, with configuration merged
//! from flags, the environment and a config file.

pub mod args;
pub mod commands;
pub mod config;

use std::io::Write;

use anyhow::Result;

use args::{Cli, Command};
use config::RunConfig;

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli, env: impl Fn(&str) -> Option<String>, out: &mut dyn Write) -> Result<u8> {
    let cfg = RunConfig::resolve(cli.global.config.as_deref(), env, cli.global.layer())?;
    match cli.command {
        Command::Ask { image, question } => commands::ask(&cfg, &image, &question, out),
        Command::Eval { manifest } => commands::eval(&cfg, &manifest, out),
        Command::Cache { action } => commands::cache(&cfg, action, out),
    }
}
