//! Runs the eight acceptance criteria in sequence and prints one line each.

use std::process::ExitCode;

use radar_core::acceptance::run_all;

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("scratch dir");
    let results = run_all(dir.path());
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed == 0 && results.len() == 8 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
