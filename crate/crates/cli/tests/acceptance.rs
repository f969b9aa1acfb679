//! Runs every acceptance criterion and prints one status line per criterion.

use std::process::ExitCode;

use scalebayes::experiments::{run_criterion, CRITERIA};

fn main() -> ExitCode {
    let mut failed = 0;
    for id in 1..=CRITERIA {
        match run_criterion(id, None) {
            Ok(report) => {
                println!("{}", report.line());
                print!("{}", report.details());
                if !report.passed() {
                    failed += 1;
                }
            }
            Err(e) => {
                println!("criterion {id:>2} FAIL error: {e}");
                failed += 1;
            }
        }
    }
    println!("acceptance: {} of {CRITERIA} criteria passed", CRITERIA - failed);
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
