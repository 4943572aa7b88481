use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use prevratio::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            let mut stdout = std::io::stdout().lock();
            if stdout.write_all(outcome.stdout.as_bytes()).is_err() {
                return ExitCode::from(1);
            }
            for line in &outcome.diagnostics {
                eprintln!("warning: {line}");
            }
            if outcome.success {
                ExitCode::SUCCESS
            } else {
                eprintln!("error: no method produced an estimate");
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
