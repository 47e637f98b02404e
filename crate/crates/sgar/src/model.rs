//! Desk-scale trainable stack: a small feed-forward encoder standing in for
//! the backbone, the projector head, manual forward/backward passes and the
//! AdamW optimizer.
//!
//! Retrieval embeddings always come from the encoder; the projector only
//! feeds the ranking losses during training.

use std::collections::{BTreeMap, BTreeSet};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{HyperParams, RunConfig};
use crate::data::BatchSampler;
use crate::error::{Result, SgarError};
use crate::losses::{self, AnchorGroup, AnchorSimilarityTable, GradLinear, ProxyBank, SimilarityTable};
use crate::numerics::{self, EmbeddingVector};
use crate::synthesis;

/// Fully connected layer, weights stored row-major out×in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearLayer {
    pub fn random(in_dim: usize, out_dim: usize, bias_init: f64, rng: &mut ChaCha8Rng) -> Self {
        let scale = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Self {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim)
                .map(|_| rng.gen_range(-scale..scale))
                .collect(),
            bias: vec![bias_init; out_dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        Self {
            in_dim: dim,
            out_dim: dim,
            weight,
            bias: vec![0.0; dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(SgarError::DimensionMismatch {
                expected: self.in_dim,
                got: x.len(),
            });
        }
        let mut y = self.bias.clone();
        for o in 0..self.out_dim {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            y[o] += numerics::dot(row, x);
        }
        Ok(y)
    }

    /// Accumulate parameter gradients for upstream `g` (w.r.t. the output)
    /// and return the gradient w.r.t. the input.
    fn backward(&self, input: &[f64], g: &[f64], grads: &mut LinearGrads) -> Vec<f64> {
        debug_assert_eq!(g.len(), self.out_dim);
        let mut gx = vec![0.0; self.in_dim];
        for o in 0..self.out_dim {
            grads.bias[o] += g[o];
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grads.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g[o] * input[i];
                gx[i] += g[o] * row[i];
            }
        }
        gx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearGrads {
    fn zeros_like(layer: &LinearLayer) -> Self {
        Self {
            weight: vec![0.0; layer.weight.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }
}

/// Gradient of `normalize(v)` applied to upstream `g`: (g − û(û·g))/‖v‖.
fn normalize_backward(unit: &[f64], norm: f64, g: &[f64]) -> Vec<f64> {
    let proj = numerics::dot(unit, g);
    unit.iter()
        .zip(g)
        .map(|(u, gi)| (gi - u * proj) / norm)
        .collect()
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

fn relu_backward(pre: &[f64], g: &[f64]) -> Vec<f64> {
    pre.iter()
        .zip(g)
        .map(|(&p, &gi)| if p > 0.0 { gi } else { 0.0 })
        .collect()
}

/// Encoder f: a chain of (linear, ReLU) blocks, a final linear layer and an
/// L2-normalization on the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub layers: Vec<LinearLayer>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    /// Input to each linear layer.
    layer_inputs: Vec<Vec<f64>>,
    /// Pre-ReLU activations of the hidden layers.
    pre_acts: Vec<Vec<f64>>,
    prenorm_norm: f64,
    unit: Vec<f64>,
}

impl Encoder {
    pub fn forward(&self, x: &[f64]) -> Result<(EmbeddingVector, EncoderCache)> {
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_acts = Vec::with_capacity(self.layers.len().saturating_sub(1));
        let mut cur = x.to_vec();
        for (idx, layer) in self.layers.iter().enumerate() {
            layer_inputs.push(cur.clone());
            let pre = layer.forward(&cur)?;
            if idx + 1 < self.layers.len() {
                pre_acts.push(pre.clone());
                cur = relu(&pre);
            } else {
                cur = pre;
            }
        }
        let norm = numerics::norm(&cur);
        let out = numerics::l2_normalize(&cur)?;
        let cache = EncoderCache {
            layer_inputs,
            pre_acts,
            prenorm_norm: norm,
            unit: out.as_slice().to_vec(),
        };
        Ok((out, cache))
    }

    /// Backpropagate `g` (w.r.t. the normalized output) into parameter
    /// gradients; returns the gradient w.r.t. the encoder input.
    pub fn backward(
        &self,
        cache: &EncoderCache,
        g: &[f64],
        grads: &mut [LinearGrads],
    ) -> Result<Vec<f64>> {
        if cache.layer_inputs.len() != self.layers.len() || grads.len() != self.layers.len() {
            return Err(SgarError::StaleCache(format!(
                "encoder cache has {} layers, model has {}",
                cache.layer_inputs.len(),
                self.layers.len()
            )));
        }
        let mut cur = normalize_backward(&cache.unit, cache.prenorm_norm, g);
        for idx in (0..self.layers.len()).rev() {
            if idx + 1 < self.layers.len() {
                cur = relu_backward(&cache.pre_acts[idx], &cur);
            }
            cur = self.layers[idx].backward(&cache.layer_inputs[idx], &cur, &mut grads[idx]);
        }
        Ok(cur)
    }
}

/// Projector q: linear → ReLU → L2-normalize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    pub layer: LinearLayer,
}

#[derive(Debug, Clone)]
pub struct ProjectorCache {
    input: Vec<f64>,
    pre_act: Vec<f64>,
    prenorm_norm: f64,
    unit: Vec<f64>,
}

impl Projector {
    pub fn forward(&self, x: &[f64]) -> Result<(EmbeddingVector, ProjectorCache)> {
        let pre = self.layer.forward(x)?;
        let post = relu(&pre);
        let norm = numerics::norm(&post);
        let out = numerics::l2_normalize(&post)?;
        Ok((
            out.clone(),
            ProjectorCache {
                input: x.to_vec(),
                pre_act: pre,
                prenorm_norm: norm,
                unit: out.as_slice().to_vec(),
            },
        ))
    }

    pub fn backward(&self, cache: &ProjectorCache, g: &[f64], grads: &mut LinearGrads) -> Vec<f64> {
        let g = normalize_backward(&cache.unit, cache.prenorm_norm, g);
        let g = relu_backward(&cache.pre_act, &g);
        self.layer.backward(&cache.input, &g, grads)
    }
}

/// All trainable state: encoder, projector and the class proxies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: Encoder,
    pub projector: Projector,
    pub proxies: ProxyBank,
}

impl ModelParams {
    /// Seeded initialization for the given input dimension and train classes.
    pub fn init(cfg: &RunConfig, input_dim: usize, train_classes: &BTreeSet<i64>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![input_dim];
        dims.extend(&cfg.encoder_hidden);
        dims.push(cfg.latent_dim);
        let layers = dims
            .windows(2)
            .map(|w| LinearLayer::random(w[0], w[1], 0.0, &mut rng))
            .collect();
        // small positive bias keeps rows out of the all-negative ReLU corner
        let projector = Projector {
            layer: LinearLayer::random(cfg.latent_dim, cfg.projector_dim, 0.1, &mut rng),
        };
        let proxies = ProxyBank {
            proxies: train_classes
                .iter()
                .map(|&c| {
                    let v: Vec<f64> = (0..cfg.latent_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    (c, numerics::l2_normalize(&v).expect("proxy init").into_vec())
                })
                .collect(),
        };
        Self {
            encoder: Encoder { layers },
            projector,
            proxies,
        }
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            encoder: self.encoder.layers.iter().map(LinearGrads::zeros_like).collect(),
            projector: LinearGrads::zeros_like(&self.projector.layer),
            proxies: self
                .proxies
                .proxies
                .iter()
                .map(|(&c, v)| (c, vec![0.0; v.len()]))
                .collect(),
        }
    }

    /// Flat parameter tensors in a fixed order; mirrors
    /// [`ModelGrads::tensors`] and the optimizer's moment slots.
    fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        for layer in &mut self.encoder.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.projector.layer.weight);
        out.push(&mut self.projector.layer.bias);
        for v in self.proxies.proxies.values_mut() {
            out.push(v);
        }
        out
    }

    fn n_proxy_tensors(&self) -> usize {
        self.proxies.proxies.len()
    }

    fn tensors_ref(&self) -> Vec<&Vec<f64>> {
        let mut out: Vec<&Vec<f64>> = Vec::new();
        for layer in &self.encoder.layers {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out.push(&self.projector.layer.weight);
        out.push(&self.projector.layer.bias);
        for v in self.proxies.proxies.values() {
            out.push(v);
        }
        out
    }

    /// Number of flat parameter tensors, in the fixed optimizer order.
    pub fn tensor_count(&self) -> usize {
        self.tensors_ref().len()
    }

    /// Length of one flat parameter tensor.
    pub fn tensor_len(&self, slot: usize) -> usize {
        self.tensors_ref()[slot].len()
    }

    /// Add `h` to a single scalar parameter; used by finite-difference
    /// gradient checks.
    pub fn perturb(&mut self, slot: usize, index: usize, h: f64) {
        self.tensors_mut()[slot][index] += h;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub encoder: Vec<LinearGrads>,
    pub projector: LinearGrads,
    pub proxies: BTreeMap<i64, Vec<f64>>,
}

impl ModelGrads {
    fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out: Vec<&Vec<f64>> = Vec::new();
        for g in &self.encoder {
            out.push(&g.weight);
            out.push(&g.bias);
        }
        out.push(&self.projector.weight);
        out.push(&self.projector.bias);
        for v in self.proxies.values() {
            out.push(v);
        }
        out
    }

    /// Single gradient scalar in the fixed optimizer tensor order; mirrors
    /// [`ModelParams::perturb`].
    pub fn tensor_entry(&self, slot: usize, index: usize) -> f64 {
        self.tensors()[slot][index]
    }
}

/// Per-tensor first/second moment accumulators plus the shared step counter
/// and AdamW constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub moments: Vec<Moments>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, hp: &HyperParams) -> Self {
        let mut p = params.clone();
        let moments = p
            .tensors_mut()
            .iter()
            .map(|t| Moments {
                m: vec![0.0; t.len()],
                v: vec![0.0; t.len()],
            })
            .collect();
        Self {
            step: 0,
            learning_rate: hp.learning_rate,
            weight_decay: hp.weight_decay,
            beta1: hp.adam_beta1,
            beta2: hp.adam_beta2,
            epsilon: hp.adam_epsilon,
            moments,
        }
    }
}

/// One decoupled-weight-decay AdamW update. Proxies are re-normalized to
/// unit length afterward.
pub fn adamw_step(params: &mut ModelParams, grads: &ModelGrads, state: &mut OptimizerState) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let n_proxies = params.n_proxy_tensors();
    let tensors = params.tensors_mut();
    let grad_tensors = grads.tensors();
    debug_assert_eq!(tensors.len(), grad_tensors.len());
    debug_assert_eq!(tensors.len(), state.moments.len());
    let n_tensors = tensors.len();
    for (slot, (tensor, grad)) in tensors.into_iter().zip(grad_tensors).enumerate() {
        let mom = &mut state.moments[slot];
        for i in 0..tensor.len() {
            let g = grad[i];
            mom.m[i] = state.beta1 * mom.m[i] + (1.0 - state.beta1) * g;
            mom.v[i] = state.beta2 * mom.v[i] + (1.0 - state.beta2) * g * g;
            let m_hat = mom.m[i] / bc1;
            let v_hat = mom.v[i] / bc2;
            tensor[i] -= state.learning_rate * (m_hat / (v_hat.sqrt() + state.epsilon))
                + state.learning_rate * state.weight_decay * tensor[i];
        }
        if slot >= n_tensors - n_proxies {
            let n = numerics::norm(tensor);
            // skip when already unit so a zero-gradient step is a no-op
            if n > numerics::DEFAULT_NORM_FLOOR && (n - 1.0).abs() > 1e-12 {
                for x in tensor.iter_mut() {
                    *x /= n;
                }
            }
        }
    }
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub metric: f64,
    pub ranking: f64,
    pub combined: f64,
    pub n_families: usize,
}

/// Forward pass plus full analytic backward pass for one batch; no
/// parameter update. Gradients are for L = L_metric + λ·L_ranking.
pub fn compute_batch_loss(
    features: &[&[f64]],
    labels: &[i64],
    params: &ModelParams,
    hp: &HyperParams,
) -> Result<(BatchLoss, ModelGrads)> {
    let n = features.len();
    let mut grads = params.zero_grads();

    // encode
    let mut latents = Vec::with_capacity(n);
    let mut enc_caches = Vec::with_capacity(n);
    for &row in features {
        let (z, cache) = params.encoder.forward(row)?;
        latents.push(z);
        enc_caches.push(cache);
    }

    // metric loss on latents
    let latent_slices: Vec<&[f64]> = latents.iter().map(|z| z.as_slice()).collect();
    let metric =
        losses::proxy_anchor_loss(&latent_slices, labels, &params.proxies, hp.margin_pa, hp.scale_pa)?;
    let mut d_latents: Vec<Vec<f64>> = metric.grad_embeddings.clone();
    for (c, g) in &metric.grad_proxies {
        grads.proxies.get_mut(c).unwrap().axpy(1.0, g);
    }

    // synthesis + ranking loss
    let candidates = synthesis::select_generation_candidates(&latents, labels, hp.gamma);
    let mut families = Vec::with_capacity(candidates.len());
    for cand in &candidates {
        let anchor_idx = cand.source_pair.0;
        families.push((
            cand.clone(),
            synthesis::generate_family(
                &latents[anchor_idx],
                cand,
                hp.alpha,
                hp.n_generated,
                labels[anchor_idx],
            )?,
        ));
    }

    let lambda = hp.lambda_mix;
    let mut ranking_value = 0.0;

    // The ReLU before the projector's normalize has a dead corner: an input
    // whose pre-activations are all negative maps to the exact zero vector.
    // Such a projection carries no usable ranking signal, so the proxy of an
    // affected class — and any family that touches the corner — is dropped
    // from this batch's ranking term instead of failing the step.
    let forward_live =
        |x: &[f64]| -> Result<Option<(crate::numerics::EmbeddingVector, ProjectorCache)>> {
            match params.projector.forward(x) {
                Ok(pair) => Ok(Some(pair)),
                Err(SgarError::NormUnderflow { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        };

    // anchor embeddings: the class proxies mapped through the projector
    let mut anchor_emb = BTreeMap::new();
    let mut anchor_cache = BTreeMap::new();
    {
        let classes: BTreeSet<i64> = families.iter().map(|(_, f)| f.class_label).collect();
        for &c in &classes {
            let proxy = params.proxies.get(c)?;
            if let Some((z, cache)) = forward_live(proxy)? {
                anchor_emb.insert(c, z);
                anchor_cache.insert(c, cache);
            }
        }
    }

    // project originals and variants, keeping caches for backward
    let mut kept = Vec::new();
    let mut proj_orig = Vec::new();
    let mut cache_orig = Vec::new();
    let mut proj_var = Vec::new();
    let mut cache_var = Vec::new();
    'family: for (cand, fam) in families {
        if !anchor_emb.contains_key(&fam.class_label) {
            continue;
        }
        let Some((orig_z, orig_c)) = forward_live(fam.original_latent.as_slice())? else {
            continue;
        };
        let mut zs = Vec::new();
        let mut cs = Vec::new();
        for v in &fam.variants {
            let Some((z, c)) = forward_live(v.as_slice())? else {
                continue 'family;
            };
            zs.push(z);
            cs.push(c);
        }
        proj_orig.push(orig_z);
        cache_orig.push(orig_c);
        proj_var.push(zs);
        cache_var.push(cs);
        kept.push((cand, fam));
    }
    let families = kept;

    if !families.is_empty() {
        let family_classes: BTreeSet<i64> = families.iter().map(|(_, f)| f.class_label).collect();
        anchor_emb.retain(|c, _| family_classes.contains(c));
        anchor_cache.retain(|c, _| family_classes.contains(c));

        // similarity tables
        let table = SimilarityTable::new(
            proj_var
                .iter()
                .zip(&proj_orig)
                .map(|(vars, orig)| {
                    vars.iter()
                        .map(|v| v.cosine(orig))
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()?,
        )?;
        let mut groups = Vec::new();
        let mut group_members: Vec<Vec<usize>> = Vec::new();
        for &c in &family_classes {
            let members: Vec<usize> = families
                .iter()
                .enumerate()
                .filter(|(_, (_, f))| f.class_label == c)
                .map(|(i, _)| i)
                .collect();
            let emb = &anchor_emb[&c];
            let rows = members
                .iter()
                .map(|&x| {
                    proj_var[x]
                        .iter()
                        .map(|v| v.cosine(emb))
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            groups.push(AnchorGroup {
                anchor_label: c,
                rows,
            });
            group_members.push(members);
        }
        let anchor_table = AnchorSimilarityTable {
            groups,
            n_families: families.len(),
        };

        let ranking = losses::ranking_loss(&table, &anchor_table, hp)?;
        ranking_value = ranking.value;

        // gradients w.r.t. the projected vectors
        let dim_p = proj_orig[0].dim();
        let mut d_proj_orig = vec![vec![0.0; dim_p]; families.len()];
        let mut d_proj_var = vec![vec![vec![0.0; dim_p]; hp.n_generated]; families.len()];
        let mut d_anchor_emb: BTreeMap<i64, Vec<f64>> = family_classes
            .iter()
            .map(|&c| (c, vec![0.0; dim_p]))
            .collect();
        for x in 0..families.len() {
            for i in 0..hp.n_generated {
                let g = lambda * ranking.grad_table[x][i];
                d_proj_var[x][i].axpy(g, &proj_orig[x].as_slice().to_vec());
                d_proj_orig[x].axpy(g, &proj_var[x][i].as_slice().to_vec());
            }
        }
        for (gi, (&class, members)) in family_classes.iter().zip(&group_members).enumerate() {
            let emb = anchor_emb[&class].as_slice().to_vec();
            for (row, &x) in members.iter().enumerate() {
                for i in 0..hp.n_generated {
                    let g = lambda * ranking.grad_anchor[gi][row][i];
                    d_proj_var[x][i].axpy(g, &emb);
                    d_anchor_emb
                        .get_mut(&class)
                        .unwrap()
                        .axpy(g, &proj_var[x][i].as_slice().to_vec());
                }
            }
        }

        // projector backward; route input gradients into latents / proxies
        for (x, (cand, fam)) in families.iter().enumerate() {
            let d_in = params
                .projector
                .backward(&cache_orig[x], &d_proj_orig[x], &mut grads.projector);
            d_latents[cand.source_pair.0].axpy(1.0, &d_in);
            for i in 0..hp.n_generated {
                let d_var =
                    params
                        .projector
                        .backward(&cache_var[x][i], &d_proj_var[x][i], &mut grads.projector);
                if hp.stop_grad_generation {
                    continue;
                }
                // variant = normalize(anchor + t·u), u = partner − anchor
                let t = fam.strengths[i];
                let (a_idx, p_idx) = cand.source_pair;
                let raw: Vec<f64> = latents[a_idx]
                    .as_slice()
                    .iter()
                    .zip(&cand.direction)
                    .map(|(a, u)| a + t * u)
                    .collect();
                let raw_norm = numerics::norm(&raw);
                let d_raw = normalize_backward(fam.variants[i].as_slice(), raw_norm, &d_var);
                d_latents[a_idx].axpy(1.0 - t, &d_raw);
                d_latents[p_idx].axpy(t, &d_raw);
            }
        }
        for (&class, cache) in &anchor_cache {
            let d_in = params
                .projector
                .backward(cache, &d_anchor_emb[&class], &mut grads.projector);
            grads.proxies.get_mut(&class).unwrap().axpy(1.0, &d_in);
        }
    }

    // encoder backward
    for ((cache, d_z), _) in enc_caches.iter().zip(&d_latents).zip(features) {
        params.encoder.backward(cache, d_z, &mut grads.encoder)?;
    }

    Ok((
        BatchLoss {
            metric: metric.value,
            ranking: ranking_value,
            combined: metric.value + lambda * ranking_value,
            n_families: families.len(),
        },
        grads,
    ))
}

/// One gradient step on one batch.
pub fn train_step(
    features: &[&[f64]],
    labels: &[i64],
    params: &mut ModelParams,
    state: &mut OptimizerState,
    hp: &HyperParams,
) -> Result<BatchLoss> {
    let (loss, grads) = compute_batch_loss(features, labels, params, hp)?;
    adamw_step(params, &grads, state);
    Ok(loss)
}

/// Per-epoch averages written to the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub metric_loss: f64,
    pub ranking_loss: f64,
    pub combined: f64,
    pub families_per_batch_mean: f64,
    pub n_batches: usize,
}

pub fn train_epoch(
    sampler: &BatchSampler,
    epoch: usize,
    params: &mut ModelParams,
    state: &mut OptimizerState,
    hp: &HyperParams,
) -> Result<EpochReport> {
    let batches = sampler.epoch_batches(epoch);
    let mut metric_sum = 0.0;
    let mut ranking_sum = 0.0;
    let mut combined_sum = 0.0;
    let mut families_sum = 0usize;
    for batch in &batches {
        let (features, labels) = sampler.batch_views(batch);
        let loss = train_step(&features, &labels, params, state, hp)?;
        metric_sum += loss.metric;
        ranking_sum += loss.ranking;
        combined_sum += loss.combined;
        families_sum += loss.n_families;
    }
    let nb = batches.len().max(1) as f64;
    Ok(EpochReport {
        epoch,
        metric_loss: metric_sum / nb,
        ranking_loss: ranking_sum / nb,
        combined: combined_sum / nb,
        families_per_batch_mean: families_sum as f64 / nb,
        n_batches: batches.len(),
    })
}

/// Versioned checkpoint: model, optimizer state and the resolved config it
/// was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub config_hash: String,
    pub params: ModelParams,
    pub opt_state: OptimizerState,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// FNV-1a over the serialized config; stored so a checkpoint can be matched
/// to the exact configuration that produced it.
pub fn config_hash(cfg: &RunConfig) -> String {
    let text = toml::to_string(cfg).unwrap_or_default();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

impl Checkpoint {
    pub fn new(config: RunConfig, params: ModelParams, opt_state: OptimizerState) -> Self {
        let config_hash = config_hash(&config);
        Self {
            version: CHECKPOINT_VERSION,
            config,
            config_hash,
            params,
            opt_state,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| SgarError::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| SgarError::Config(e.to_string()))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(SgarError::Config(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

/// Embed rows with the encoder only. This is the sole retrieval entry
/// point; projector outputs never leave training.
pub fn embed(params: &ModelParams, rows: &[&[f64]]) -> Result<Vec<EmbeddingVector>> {
    rows.iter()
        .map(|&r| params.encoder.forward(r).map(|(z, _)| z))
        .collect()
}
