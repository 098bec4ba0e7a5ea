//! Model and training configuration.
//!
//! Defaults follow the reference regime: hidden size 200 for every LSTM and
//! BLSTM, 2 stacked layers, 300-dimensional word embeddings, Adam. The
//! remaining knobs (batch size, learning rate, clipping, patience, label
//! embedding width) have conventional defaults and are all overridable.

use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelVariant {
    WithDecoder,
    WithoutDecoder,
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelVariant::WithDecoder => write!(f, "with_decoder"),
            ModelVariant::WithoutDecoder => write!(f, "without_decoder"),
        }
    }
}

impl FromStr for ModelVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "with_decoder" => Ok(ModelVariant::WithDecoder),
            "without_decoder" => Ok(ModelVariant::WithoutDecoder),
            other => Err(format!(
                "unknown variant `{other}` (expected with_decoder or without_decoder)"
            )),
        }
    }
}

/// Architecture of a bi-model: everything needed to rebuild the parameter
/// tensors of a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub embed_dim: usize,
    pub label_embed_dim: usize,
    /// One word-embedding table read by both task networks when true.
    pub tie_embeddings: bool,
    /// When false, every cross-network state is replaced by zeros: the
    /// ablated baseline with the identical parameter count.
    pub share_states: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: ModelVariant::WithDecoder,
            hidden_dim: 200,
            num_layers: 2,
            embed_dim: 300,
            label_embed_dim: 50,
            tie_embeddings: true,
            share_states: true,
        }
    }
}

/// Training-loop hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without dev improvement before stopping. Zero stops after the
    /// first epoch.
    pub patience: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// Recompute the intent network's shared states after its update, so the
    /// slot pass sees the just-updated network.
    pub refresh_h1: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 1e-3,
            max_epochs: 50,
            patience: 10,
            seed: 42,
            clip_norm: 5.0,
            refresh_h1: true,
        }
    }
}
