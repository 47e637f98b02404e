//! Train the encoder/projector stack on the bundled synthetic dataset and
//! print the per-epoch loss trajectory.
//!
//! Run with: cargo run --release --example train_synthetic

use sgar::cli;
use sgar::config::RunConfig;

fn main() -> anyhow::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.output_dir = Some("target/example-runs".to_string());

    let outcome = cli::cmd_train(&cfg)?;
    println!("epoch  metric    ranking   combined  families/batch");
    for r in outcome.reports.iter().step_by(5) {
        println!(
            "{:>5}  {:<8.4}  {:<8.4}  {:<8.4}  {:.1}",
            r.epoch, r.metric_loss, r.ranking_loss, r.combined, r.families_per_batch_mean
        );
    }
    let last = outcome.reports.last().expect("at least one epoch");
    println!(
        "\nfinal combined loss {:.4} after {} epochs",
        last.combined,
        outcome.reports.len()
    );
    println!("artifacts in {}", outcome.run_dir.display());
    Ok(())
}
