use std::process::ExitCode;

use clap::Parser;
use sqi_cli::args::Cli;
use sqi_cli::commands::exit;

fn main() -> ExitCode {
    // clap exits with 2 on usage errors, which is reserved for unreadable
    // answers here
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                exit::ERROR
            } else {
                exit::OK
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let mut stdout = std::io::stdout().lock();
    match sqi_cli::run(cli, |k| std::env::var(k).ok(), &mut stdout) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::ERROR)
        }
    }
}
