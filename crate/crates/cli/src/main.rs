mod args;
mod error;
mod explain_cmd;
mod invocation;
mod manifest;
mod model;
mod run;

use args::{Cli, Command};
use clap::Parser;
use error::CliResult;
use manifest::RunManifest;
use std::process::ExitCode;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

fn dispatch(command: &Command) -> CliResult<()> {
    if let Command::Replay { manifest, out } = command {
        let recorded = RunManifest::load(manifest)?;
        return run::execute(&recorded.invocation, Some(out));
    }
    let (invocation, out) = command.resolve()?;
    run::execute(&invocation, out.as_deref())
}
