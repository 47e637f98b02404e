//! Hyperparameters and run configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SgarError};

/// All loss and schedule hyperparameters.
///
/// Defaults follow the reference setting: δ=0.3, τ=64, α=1.0, N=5, γ=0.05,
/// λ=0.1, φ=0.1. The anchor-loss scale β and the Proxy-Anchor constants are
/// not pinned by that setting; they default to the Proxy-Anchor convention
/// (scale 32, margin 0.1) and are configurable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    /// Margin δ between neighboring generated samples.
    pub delta: f64,
    /// LogSumExp scale τ of the sort loss.
    pub tau: f64,
    /// Generation strength α.
    pub alpha: f64,
    /// Number of generated variants per selected original (N).
    pub n_generated: usize,
    /// Generation margin γ: minimum same-class cosine to admit a pair.
    pub gamma: f64,
    /// Mixing weight λ between the metric loss and the ranking loss.
    pub lambda_mix: f64,
    /// Anchor-loss margin φ.
    pub phi: f64,
    /// Anchor-loss scale β.
    pub beta: f64,
    /// Proxy-Anchor baseline margin.
    pub margin_pa: f64,
    /// Proxy-Anchor baseline scale.
    pub scale_pa: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Classes per batch (P).
    pub classes_per_batch: usize,
    /// Samples per class per batch (K); must be >= 2 so positive pairs exist.
    pub samples_per_class: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Cut the gradient path through the synthesis interpolation.
    pub stop_grad_generation: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            delta: 0.3,
            tau: 64.0,
            alpha: 1.0,
            n_generated: 5,
            gamma: 0.05,
            lambda_mix: 0.1,
            phi: 0.1,
            beta: 32.0,
            margin_pa: 0.1,
            scale_pa: 32.0,
            learning_rate: 1e-4,
            epochs: 40,
            classes_per_batch: 5,
            samples_per_class: 4,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            stop_grad_generation: false,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(SgarError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.beta > 0.0) {
            return Err(SgarError::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.n_generated < 1 {
            return Err(SgarError::Config("n_generated must be >= 1".into()));
        }
        if self.lambda_mix < 0.0 {
            return Err(SgarError::Config("lambda_mix must be >= 0".into()));
        }
        if self.delta < 0.0 {
            return Err(SgarError::Config("delta must be >= 0".into()));
        }
        if self.samples_per_class < 2 {
            return Err(SgarError::Config("samples_per_class must be >= 2".into()));
        }
        if self.classes_per_batch < 1 {
            return Err(SgarError::Config("classes_per_batch must be >= 1".into()));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("phi", self.phi),
            ("learning_rate", self.learning_rate),
        ] {
            if !v.is_finite() {
                return Err(SgarError::Config(format!("{name} must be finite")));
            }
        }
        Ok(())
    }

    /// Batch size implied by the P×K spec.
    pub fn batch_size(&self) -> usize {
        self.classes_per_batch * self.samples_per_class
    }
}

/// Synthetic dataset settings for runs without an input table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub train_classes: usize,
    pub test_classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub intra_scale: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train_classes: 20,
            test_classes: 10,
            samples_per_class: 8,
            dim: 16,
            intra_scale: 0.6,
        }
    }
}

/// Full run configuration: hyperparameters plus model dims, data source,
/// seed and outputs. Flag overrides win over the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub hp: HyperParams,
    /// Hidden layer widths of the encoder MLP.
    pub encoder_hidden: Vec<usize>,
    /// Encoder output (latent) dimension.
    pub latent_dim: usize,
    /// Projector output dimension.
    pub projector_dim: usize,
    /// Path to a feature CSV; when absent the bundled synthetic set is used.
    pub dataset: Option<String>,
    /// Optional sidecar file listing test class ids, one per line.
    pub split_file: Option<String>,
    pub synthetic: SyntheticConfig,
    pub seed: u64,
    pub output_dir: Option<String>,
    pub eval_ks: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            hp: HyperParams::default(),
            encoder_hidden: vec![64],
            latent_dim: 16,
            projector_dim: 16,
            dataset: None,
            split_file: None,
            synthetic: SyntheticConfig::default(),
            seed: 17,
            output_dir: None,
            eval_ks: vec![1, 2, 4, 8],
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        if self.latent_dim < 2 {
            return Err(SgarError::Config("latent_dim must be >= 2".into()));
        }
        if self.projector_dim < 2 {
            return Err(SgarError::Config("projector_dim must be >= 2".into()));
        }
        if self.eval_ks.is_empty() {
            return Err(SgarError::Config("eval_ks must be nonempty".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(s).map_err(|e| SgarError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
