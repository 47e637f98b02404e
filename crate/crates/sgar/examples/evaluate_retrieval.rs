//! Train on the synthetic dataset, then evaluate zero-shot retrieval on the
//! unseen test classes: Recall@K plus rank preservation of synthesized
//! intra-class orderings.
//!
//! Run with: cargo run --release --example evaluate_retrieval

use sgar::cli;
use sgar::config::RunConfig;

fn main() -> anyhow::Result<()> {
    let cfg = RunConfig::default();
    let table = cli::build_dataset(&cfg)?;
    let (params, _, _) = cli::train_model(&cfg, &table)?;
    let report = cli::evaluate_model(&params, &table, &cfg)?;

    println!("queries: {} (unseen-class self-retrieval)", report.n_queries);
    for (k, r) in &report.recall_at {
        println!("recall@{k}: {r:.4}");
    }
    if let Some(rho) = report.rank_preservation_rho {
        println!("rank preservation rho: {rho:.4}");
    }
    Ok(())
}
