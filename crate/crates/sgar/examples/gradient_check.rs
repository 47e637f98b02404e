//! Verify every analytic gradient path against finite differences: the sort
//! and anchor ranking losses, the combined ranking loss, the Proxy-Anchor
//! metric loss, and the full model backward pass.
//!
//! Run with: cargo run --release --example gradient_check

use sgar::cli;
use sgar::config::RunConfig;

fn main() -> anyhow::Result<()> {
    let cfg = RunConfig::default();
    let outcome = cli::cmd_gradcheck(&cfg)?;
    for (name, err, tol) in &outcome.checks {
        let verdict = if err < tol { "pass" } else { "FAIL" };
        println!("{verdict}  {name:<20} max relative error {err:.3e} (tolerance {tol:.0e})");
    }
    anyhow::ensure!(outcome.passed(), "gradient check failed");
    Ok(())
}
