mod args;
mod commands;
mod manifest;
mod resolve;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// How a subcommand failed, which decides the exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, keys or values: exit 2.
    Usage(String),
    /// Anything that went wrong while running: exit 1.
    Runtime(cacl_core::Error),
    /// The command ran but its check did not pass: exit 1.
    Failed(String),
}

impl From<cacl_core::Error> for CliError {
    fn from(e: cacl_core::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let g = &cli.global;
    match &cli.command {
        Command::GenData(a) => commands::gen_data(g, a),
        Command::Train(a) => commands::train(g, a),
        Command::Eval(a) => commands::eval(g, a),
        Command::Cluster(a) => commands::cluster(g, a),
        Command::Gradcheck(a) => commands::gradcheck(g, a),
        Command::Ablate(a) => commands::ablate(g, a),
        Command::DumpEmbeddings(a) => commands::dump_embeddings(g, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = if cli.global.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            eprintln!("run `cacl --help` for usage");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
