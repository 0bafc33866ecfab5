use std::process::ExitCode;

use clap::Parser;
use uwsn::cli::{self, Args};

fn main() -> ExitCode {
    let args = Args::parse();
    match cli::run(&args) {
        Ok(report) => {
            println!("{} point(s) x {} trial(s) written to {}", report.points, report.trials, report.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("uwsn: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
