mod cli;
mod commands;

use std::process::ExitCode;

use aqisense::formats::Config;
use clap::error::{ContextKind, ErrorKind};
use clap::Parser;

use crate::cli::Cli;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            ErrorKind::InvalidSubcommand => {
                let name = e.get(ContextKind::InvalidSubcommand).map(|v| v.to_string()).unwrap_or_default();
                eprintln!("unknown command: {name}");
                eprintln!("run `aqisense --help` for the list of commands");
                return ExitCode::from(2);
            }
            _ => {
                eprint!("{e}");
                return ExitCode::from(2);
            }
        },
    };
    let result = Config::resolve(cli.config.as_deref())
        .map_err(Into::into)
        .and_then(|config| commands::run(cli.command, &config));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
