use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use seqkv::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = run(&cli);
    let mut stdout = std::io::stdout().lock();
    let _ = stdout.write_all(outcome.stdout.as_bytes());
    let _ = stdout.flush();
    match outcome.result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("seqkv: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
