//! Run configuration: model geometry, training schedule and the on-disk
//! config file consumed by the CLI. Unknown keys are rejected everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which composition network maps (source image, text) to a query embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// Vector-level gated residual fusion.
    TirgA,
    /// Spatial gated residual fusion (3x3 convs over the broadcast text).
    TirgC,
    /// Two-layer MLP over the concatenated embeddings.
    Concat,
    ImageOnly,
    TextOnly,
}

impl ModelVariant {
    pub fn label(&self) -> &'static str {
        match self {
            ModelVariant::TirgA => "TIRG_A",
            ModelVariant::TirgC => "TIRG_C",
            ModelVariant::Concat => "Concatenation",
            ModelVariant::ImageOnly => "Image-only",
            ModelVariant::TextOnly => "Text-only",
        }
    }
}

/// Geometry of the encoders and fusion network.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Square input image side; 32 or 64.
    pub image_size: usize,
    /// Channel widths of the stride-2 conv blocks; the last is the feature
    /// map depth exposed as the low-level image tap.
    pub conv_widths: Vec<usize>,
    /// Embedding dimension shared by every high-level tap.
    pub embed_dim: usize,
    /// Word embedding dimension.
    pub text_embed_dim: usize,
    /// Recurrent hidden width (projected to `embed_dim`).
    pub text_hidden: usize,
    /// Token sequences are padded / truncated to this length.
    pub max_tokens: usize,
    /// Vocabulary size including pad and OOV entries.
    pub vocab_size: usize,
    pub variant: ModelVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            conv_widths: vec![32, 64, 128, 256],
            embed_dim: 512,
            text_embed_dim: 64,
            text_hidden: 512,
            max_tokens: 8,
            vocab_size: 64,
            variant: ModelVariant::TirgA,
        }
    }
}

impl ModelConfig {
    /// Spatial side of the last conv feature map.
    pub fn feature_map_side(&self) -> usize {
        let mut side = self.image_size;
        for _ in &self.conv_widths {
            side = crate::kernels::ConvSpec { kernel: 3, stride: 2 }.out_len(side);
        }
        side
    }

    pub fn feature_channels(&self) -> usize {
        *self.conv_widths.last().expect("at least one conv block")
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.image_size, 32 | 64) {
            return Err(Error::Config(format!(
                "image_size must be 32 or 64, got {}",
                self.image_size
            )));
        }
        if self.conv_widths.is_empty() {
            return Err(Error::Config("conv_widths must be non-empty".into()));
        }
        if self.feature_map_side() < 2 {
            return Err(Error::Config("feature map side must be >= 2".into()));
        }
        if self.max_tokens == 0 || self.embed_dim == 0 {
            return Err(Error::Config("zero-sized model dimension".into()));
        }
        Ok(())
    }
}

/// Similarity kernel selection (metric learning module owns the semantics).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Dot,
    NegativeL2,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub normalize: bool,
    /// Initial temperature for the dot kernel (learnable, kept positive).
    pub init_temperature: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig { kind: KernelKind::Dot, normalize: true, init_temperature: 10.0 }
    }
}

/// Which retrieval loss the training loop uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Softmax over all batch targets (K = B, M = 1).
    BatchClassification,
    /// Soft triplet (K = 2).
    SoftTriplet,
}

/// Training schedule and objective weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Learning rate is multiplied by 0.1 at this fraction of the run.
    pub lr_decay_at: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mu_init: f64,
    pub mu_update_every: usize,
    pub mu_min: f64,
    pub mu_max: f64,
    /// Denominator factor in the mu update rule.
    pub mu_factor: f64,
    pub loss_variant: LossVariant,
    /// Labels of the MI pairings to train with (see `mi::DimPairConfig`).
    pub dim_pairs: Vec<String>,
    pub seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 20_000,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            lr_decay_at: 0.8,
            alpha: 0.5,
            beta: 1.0,
            gamma: 0.1,
            mu_init: 0.001,
            mu_update_every: 1250,
            mu_min: 1e-6,
            mu_max: 10.0,
            mu_factor: 15.0,
            loss_variant: LossVariant::SoftTriplet,
            dim_pairs: vec![],
            seed: 0,
            log_every: 10,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if self.mu_update_every == 0 || self.mu_update_every > self.iterations {
            return Err(Error::Config(
                "mu_update_every must divide the run into at least one window".into(),
            ));
        }
        if self.mu_init < 0.0 {
            return Err(Error::Config("mu_init must be nonnegative".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(())
    }
}
