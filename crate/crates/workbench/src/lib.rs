//! Command-line workbench: configuration, artifacts, and manifests around
//! the `robustedit-core` pipeline.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod report;

use std::ffi::OsString;

use clap::Parser;

use cli::Cli;
use error::CliError;

/// Parses `args`, runs the command, and returns the process exit status.
/// Errors go to stderr as one JSON object.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<Vec<std::path::PathBuf>, CliError> {
    let cfg = cli.flags.resolve()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.flags.workers.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| commands::execute(cli.command, &cfg))
}
