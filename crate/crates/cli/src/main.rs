mod args;
mod commands;
mod support;

use std::io::IsTerminal;
use std::process::ExitCode;

use clap::Parser;
use serde_json::json;
use tracing_subscriber::EnvFilter;

use args::{Cli, Command};

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();

    let cli = Cli::parse();
    let name = cli.command.name();
    let result = match cli.command {
        Command::Grade(a) => commands::grade(a).await,
        Command::Split(a) => commands::split_cmd(a),
        Command::Filter(a) => commands::filter(a),
        Command::Build(a) => commands::build(a).await,
        Command::Classify(a) => commands::classify(a).await,
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a).await,
        Command::Serve(a) => commands::serve(a).await,
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let causes: Vec<String> = err.chain().skip(1).map(|c| c.to_string()).collect();
            let report = json!({ "command": name, "error": err.to_string(), "causes": causes });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
