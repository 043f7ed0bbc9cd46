use std::io::{self, Write};
use std::process::ExitCode;

use clap::Parser;
use ear_harness::{execute, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    let result = execute(cli, &mut lock);
    let _ = lock.flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ear: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
