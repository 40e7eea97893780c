use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use dpwate_cli::{Cli, CliError, RunConfig};

fn main() -> ExitCode {
    let (command, flags) = Cli::parse().command.split();
    match RunConfig::resolve(command, flags).and_then(|cfg| dpwate_cli::run(&cfg).map(|o| (cfg, o))) {
        Ok((cfg, outcome)) => {
            let mut stdout = std::io::stdout().lock();
            let written = match (&cfg.output, &outcome.table) {
                (Some(_), Some(table)) => write!(stdout, "{table}"),
                (Some(_), None) => Ok(()),
                (None, table) => {
                    if let Some(t) = table {
                        eprint!("{t}");
                    }
                    writeln!(stdout, "{}", outcome.json)
                }
            };
            match written {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(&CliError::Output { path: "<stdout>".into(), message: e.to_string() }),
            }
        }
        Err(e) => fail(&e),
    }
}

fn fail(e: &CliError) -> ExitCode {
    let body = serde_json::json!({ "error": e.report() });
    eprintln!("{body}");
    ExitCode::from(e.exit_code() as u8)
}
