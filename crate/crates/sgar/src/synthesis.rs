//! Latent-space sample synthesis: pick eligible positive pairs in a batch
//! and build, per eligible original, a family of variants with graded
//! intra-class strength.
//!
//! Variants are chord interpolations from the anchor toward a real
//! same-class partner, renormalized. Strength j·α/N grows with the variant
//! index, so cosine-to-anchor decreases monotonically along a family.

use crate::error::Result;
use crate::model::Projector;
use crate::numerics::{self, EmbeddingVector, LatentVector};

/// A direction in latent space pointing from one original toward a
/// same-class partner.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticDirection {
    pub direction: Vec<f64>,
    /// (index of the original anchor, index of the positive partner).
    pub source_pair: (usize, usize),
}

/// One original latent vector plus its synthesized variants, and their
/// projections once [`project_family`] has run.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedFamily {
    pub original_latent: LatentVector,
    pub variants: Vec<LatentVector>,
    /// Strictly increasing interpolation strengths in (0, α].
    pub strengths: Vec<f64>,
    pub class_label: i64,
    /// Batch index of the anchor this family grew from.
    pub anchor_index: usize,
    /// Batch index of the partner that supplied the direction.
    pub partner_index: usize,
    pub projected_original: Option<EmbeddingVector>,
    pub projected_variants: Vec<EmbeddingVector>,
}

/// For each original in the batch, pick the same-class partner of maximal
/// cosine similarity (ties to the lowest index) and keep the pair only when
/// that similarity exceeds the generation margin γ. An empty result is
/// valid and simply means no ranking loss this step.
pub fn select_generation_candidates(
    latents: &[LatentVector],
    labels: &[i64],
    gamma: f64,
) -> Vec<SemanticDirection> {
    debug_assert_eq!(latents.len(), labels.len());
    let mut out = Vec::new();
    for a in 0..latents.len() {
        let mut best: Option<(usize, f64)> = None;
        for p in 0..latents.len() {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            let sim = latents[a].cosine(&latents[p]).expect("batch latents share a dim");
            let better = match best {
                None => true,
                Some((_, s)) => sim > s,
            };
            if better {
                best = Some((p, sim));
            }
        }
        if let Some((p, sim)) = best {
            if sim > gamma {
                let direction: Vec<f64> = latents[p]
                    .as_slice()
                    .iter()
                    .zip(latents[a].as_slice())
                    .map(|(rp, ra)| rp - ra)
                    .collect();
                out.push(SemanticDirection {
                    direction,
                    source_pair: (a, p),
                });
            }
        }
    }
    out
}

/// Synthesize the latent part of a family: variant j = l2_normalize(anchor
/// + (j·α/n)·u) for j = 1..n.
pub fn generate_family(
    anchor: &LatentVector,
    direction: &SemanticDirection,
    alpha: f64,
    n: usize,
    class_label: i64,
) -> Result<GeneratedFamily> {
    debug_assert!(n >= 1);
    debug_assert!(alpha >= 0.0);
    let mut variants = Vec::with_capacity(n);
    let mut strengths = Vec::with_capacity(n);
    for j in 1..=n {
        let t = j as f64 * alpha / n as f64;
        let raw: Vec<f64> = anchor
            .as_slice()
            .iter()
            .zip(&direction.direction)
            .map(|(a, u)| a + t * u)
            .collect();
        variants.push(numerics::l2_normalize(&raw)?);
        strengths.push(t);
    }
    Ok(GeneratedFamily {
        original_latent: anchor.clone(),
        variants,
        strengths,
        class_label,
        anchor_index: direction.source_pair.0,
        partner_index: direction.source_pair.1,
        projected_original: None,
        projected_variants: Vec::new(),
    })
}

/// Fill the projected fields of a family through the projector.
pub fn project_family(family: &mut GeneratedFamily, projector: &Projector) -> Result<()> {
    family.projected_original = Some(projector.forward(family.original_latent.as_slice())?.0);
    family.projected_variants = family
        .variants
        .iter()
        .map(|v| projector.forward(v.as_slice()).map(|(e, _)| e))
        .collect::<Result<_>>()?;
    Ok(())
}

/// Latent cosine of each variant to its anchor, in variant order.
pub fn latent_cosines_to_anchor(family: &GeneratedFamily) -> Vec<f64> {
    family
        .variants
        .iter()
        .map(|v| v.cosine(&family.original_latent).expect("family dims match"))
        .collect()
}
