//! Synthesize intra-class variant families directly in feature space and
//! show the monotone decay of cosine-to-anchor with synthesis strength.
//!
//! Run with: cargo run --release --example synthesize_families

use sgar::cli;
use sgar::config::RunConfig;
use sgar::numerics::l2_normalize;
use sgar::synthesis;

fn main() -> anyhow::Result<()> {
    let cfg = RunConfig::default();
    let table = cli::build_dataset(&cfg)?;

    // use the raw normalized features as latents: no trained model needed
    let indices = table.train_indices();
    let latents = indices
        .iter()
        .map(|&i| l2_normalize(&table.features[i]))
        .collect::<sgar::Result<Vec<_>>>()?;
    let labels: Vec<i64> = indices.iter().map(|&i| table.labels[i]).collect();

    let candidates = synthesis::select_generation_candidates(&latents, &labels, cfg.hp.gamma);
    println!(
        "{} of {} originals admit a generation partner (gamma = {})",
        candidates.len(),
        latents.len(),
        cfg.hp.gamma
    );

    for cand in candidates.iter().take(3) {
        let anchor = cand.source_pair.0;
        let family = synthesis::generate_family(
            &latents[anchor],
            cand,
            cfg.hp.alpha,
            cfg.hp.n_generated,
            labels[anchor],
        )?;
        let cosines = synthesis::latent_cosines_to_anchor(&family);
        println!(
            "\nanchor {} (class {}), partner {}:",
            table.ids[indices[anchor]],
            family.class_label,
            table.ids[indices[family.partner_index]]
        );
        for ((j, s), c) in family.strengths.iter().enumerate().zip(&cosines) {
            println!("  variant {} strength {:.2} cosine-to-anchor {:.4}", j + 1, s, c);
        }
    }
    Ok(())
}
