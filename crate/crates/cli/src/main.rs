mod args;
mod commands;

use std::fmt;
use std::process::ExitCode;

use clap::Parser;

use args::Cli;

/// An error caused by the user's input (bad file, unknown name, invalid
/// option). Reported with exit code 2; anything else exits with 1.
#[derive(Debug)]
pub struct InputError(String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

pub fn input(e: impl fmt::Display) -> anyhow::Error {
    InputError(e.to_string()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(path) = &cli.save_config {
        let saved = serde_json::to_string_pretty(&cli.command)
            .map_err(anyhow::Error::from)
            .and_then(|json| std::fs::write(path, json).map_err(anyhow::Error::from));
        if let Err(e) = saved {
            eprintln!("error: cannot save config to {}: {e}", path.display());
            return ExitCode::from(1);
        }
    }
    match commands::execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<InputError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
