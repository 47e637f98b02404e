//! Scalar/vector kernels shared by every other module.
//!
//! Everything here is a pure function on immutable inputs. All loss-critical
//! arithmetic is f64; the smooth-hinge evaluation is max-shifted so that
//! scale factors up to a few thousand do not overflow.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SgarError};

/// Norm floor below which a vector is considered degenerate.
pub const DEFAULT_NORM_FLOOR: f64 = 1e-12;

/// An L2-normalized feature vector. The unit of all similarity computation.
///
/// Invariant: every entry is finite and the norm is 1 within 1e-9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f64>);

/// A vector in the backbone's latent space. In this artifact the encoder
/// L2-normalizes its output, so latent vectors share the embedding
/// invariants; the alias records which space a value lives in.
pub type LatentVector = EmbeddingVector;

impl EmbeddingVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Cosine similarity between two unit vectors, clamped to [-1, 1]
    /// against rounding.
    pub fn cosine(&self, other: &EmbeddingVector) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(SgarError::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(dot(&self.0, &other.0).clamp(-1.0, 1.0))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Normalize `v` to unit L2 norm.
pub fn l2_normalize(v: &[f64]) -> Result<EmbeddingVector> {
    l2_normalize_with_floor(v, DEFAULT_NORM_FLOOR)
}

pub fn l2_normalize_with_floor(v: &[f64], floor: f64) -> Result<EmbeddingVector> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(SgarError::NonFinite("l2_normalize input"));
    }
    let n = norm(v);
    if n <= floor {
        return Err(SgarError::NormUnderflow { norm: n, floor });
    }
    Ok(EmbeddingVector(v.iter().map(|x| x / n).collect()))
}

/// Cosine similarity of two unit vectors.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    a.cosine(b)
}

/// ln(1 + Σ_k e^{t_k}), evaluated with the implicit 1 treated as e^0 in the
/// max shift so no intermediate exponential overflows.
pub fn log1p_exp_sum(terms: &[f64]) -> f64 {
    let m = terms.iter().fold(0.0_f64, |acc, &t| acc.max(t));
    let sum: f64 = (-m).exp() + terms.iter().map(|&t| (t - m).exp()).sum::<f64>();
    m + sum.ln()
}

/// Same as [`log1p_exp_sum`] but also returns the softmax-style weights
/// w_k = e^{t_k} / (1 + Σ_j e^{t_j}), the per-term derivative of the value.
pub fn log1p_exp_sum_with_weights(terms: &[f64]) -> (f64, Vec<f64>) {
    let m = terms.iter().fold(0.0_f64, |acc, &t| acc.max(t));
    let shifted: Vec<f64> = terms.iter().map(|&t| (t - m).exp()).collect();
    let denom = (-m).exp() + shifted.iter().sum::<f64>();
    let value = m + denom.ln();
    let weights = shifted.iter().map(|&e| e / denom).collect();
    (value, weights)
}

/// Smooth maximum-violation hinge: (1/τ)·ln(1 + Σ_k e^{τ·v_k}).
///
/// Upper-bounds max(0, max_k v_k) and approaches it as τ grows; the gap is
/// at most ln(1+K)/τ for K violations.
pub fn smooth_max_hinge(violations: &[f64], tau: f64) -> f64 {
    debug_assert!(tau > 0.0);
    let scaled: Vec<f64> = violations.iter().map(|&v| tau * v).collect();
    log1p_exp_sum(&scaled) / tau
}
