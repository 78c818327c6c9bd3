//! A quick pass of the finite-difference suite with fewer seeds than the
//! `grad-check` subcommand uses.

use vitfreeze::gradcheck::{run_suite, GradCheckOptions};

fn main() -> anyhow::Result<()> {
    let opts = GradCheckOptions {
        seeds: 3,
        ..GradCheckOptions::default()
    };
    let report = run_suite(&opts)?;
    for c in &report.cases {
        println!("{:<20} {:.2e}  ({} coords)", c.name, c.max_rel_err, c.coords);
    }
    println!("{}", if report.passed() { "all cases within tolerance" } else { "FAILED" });
    Ok(())
}
