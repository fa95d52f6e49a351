use p3d_core::selftest::{run_selftest, SelftestOptions};

use crate::error::{CliError, CliResult};
use crate::{Common, SelftestArgs};

pub fn run(args: &SelftestArgs, _common: &Common) -> CliResult {
    let results = run_selftest(SelftestOptions {
        inject_fault: args.inject_fault,
    });
    for r in &results {
        println!("{} {} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("{} checks passed", results.len());
        Ok(())
    } else {
        Err(CliError::test_failure(format!("failed checks: {}", failed.join(", "))))
    }
}
