//! Sweep the ranking-loss weight lambda and report unseen-class Recall@1
//! and rank preservation per value: small lambda helps, large lambda
//! degrades retrieval.
//!
//! Run with: cargo run --release --example ablation_sweep

use std::path::Path;

use sgar::cli;
use sgar::config::RunConfig;

fn main() -> anyhow::Result<()> {
    let mut cfg = RunConfig::default();
    // a harder dataset and a faster schedule so the sweep differentiates
    cfg.seed = 3;
    cfg.hp.learning_rate = 2e-3;
    cfg.hp.epochs = 80;
    cfg.synthetic.intra_scale = 2.4;
    cfg.synthetic.samples_per_class = 12;

    let out = Path::new("target/ablation_lambda.csv");
    let rows = cli::cmd_ablate(&cfg, "lambda", &[0.0, 0.1, 10.0], out, false)?;
    println!("lambda   R@1      rho");
    for row in &rows {
        println!(
            "{:<7}  {:<7}  {}",
            row.value,
            row.r_at_1.map_or("-".into(), |v| format!("{v:.4}")),
            row.rho.map_or("-".into(), |v| format!("{v:.4}")),
        );
    }
    println!("\nCSV written to {}", out.display());
    Ok(())
}
