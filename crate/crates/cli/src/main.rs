mod args;
mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::Ctx;
use settings::Settings;

/// Default parent of per-command output directories.
const OUT_ROOT_ENV: &str = "DECLAB_OUT_ROOT";

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation: exit status 2.
    Usage(String),
    /// Failure while running: exit status 1.
    Runtime(declab::Error),
}

impl From<declab::Error> for CliError {
    fn from(e: declab::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let settings = Settings::load(cli.common.config.as_deref(), &cli.common.sets)?;
    let out = cli.common.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| "runs".into());
        root.join(cli.command.name())
    });
    let mut ctx = Ctx { settings, out };
    match &cli.command {
        Command::GenData(a) => commands::gen_data(&mut ctx, a),
        Command::Train(a) => commands::train_cmd(&mut ctx, a),
        Command::Translate(a) => commands::translate(&mut ctx, a),
        Command::Eval(a) => commands::eval(&mut ctx, a),
        Command::Probe(a) => commands::probe(&mut ctx, a),
        Command::Align(a) => commands::align(&mut ctx, a),
        Command::Coverage(a) => commands::coverage(&mut ctx, a),
        Command::Params(a) => commands::params(&mut ctx, a),
        Command::Bench(a) => commands::bench(&mut ctx, a),
        Command::Export(a) => commands::export(&mut ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
