use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use wmcloak::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json = cli.verb.common().json;
    match run(&cli) {
        Ok(outcome) => {
            let text = if json {
                serde_json::to_string_pretty(&outcome.result).expect("result serializes")
            } else {
                outcome.summary
            };
            // a closed pipe on stdout is not a failure of the run
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
