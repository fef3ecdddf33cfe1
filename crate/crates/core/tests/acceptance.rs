//! One pass/fail line per acceptance check; exits non-zero if any fails.

use rrnco_core::suite::{run, SuiteOptions};

fn main() {
    let skip_learning = std::env::var_os("RRNCO_SKIP_LEARNING").is_some();
    let results = run(
        SuiteOptions {
            learning: !skip_learning,
        },
        |o| println!("{o}"),
    );
    let failed = results.iter().filter(|o| !o.passed).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
