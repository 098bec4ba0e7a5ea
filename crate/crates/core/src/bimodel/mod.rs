//! The bi-model: two cross-connected BLSTM task networks trained
//! asynchronously.
//!
//! The intent network and the slot network each own a bidirectional encoder
//! (and, in the decoder variant, a unidirectional LSTM decoder plus output
//! projection). Once per training iteration each network encodes the batch
//! without any cross input; the resulting hidden states are detached and fed
//! to the *other* network as auxiliary input. Detaching is what makes the
//! training asynchronous: each network minimizes its own cross entropy and
//! no gradient ever crosses between them.

pub(crate) mod checkpoint;
mod forward;
pub(crate) mod train;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_from, save_checkpoint, save_checkpoint_to, CheckpointError,
    CHECKPOINT_VERSION,
};
pub use forward::LabelFeeding;
pub use train::{train, EpochRecord, TrainOutcome};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, ModelVariant};
use crate::data::Vocabulary;
use crate::rnn::{uniform_param, BlstmEncoder, LstmDecoder};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Symbol-table sizes the parameter shapes depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabDims {
    pub words: usize,
    pub intents: usize,
    /// Slot rows including the reserved PAD and BOS rows.
    pub slot_rows: usize,
}

impl VocabDims {
    pub fn of(vocab: &Vocabulary) -> Self {
        VocabDims {
            words: vocab.num_words(),
            intents: vocab.num_intents(),
            slot_rows: vocab.num_slot_rows(),
        }
    }
}

/// Intent task network: encoder `f1`, optional one-step decoder `g1`, and
/// the projection onto intent logits.
pub struct TaskNetworkIntent<T> {
    pub encoder: BlstmEncoder<T>,
    pub decoder: Option<LstmDecoder<T>>,
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
}

/// Slot task network: encoder `f2`, optional decoder `g2`, the label
/// embedding table that feeds back the previous tag, and the per-step
/// projection onto tag logits.
pub struct TaskNetworkSlot<T> {
    pub encoder: BlstmEncoder<T>,
    pub decoder: Option<LstmDecoder<T>>,
    pub label_embedding: Tensor<T>,
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
}

/// Hidden states exchanged between the networks, one `batch x 2*hidden`
/// tensor per step. Always detached: consuming them builds no gradient path
/// into the network that produced them.
pub struct SharedStates<T> {
    pub h1: Vec<Tensor<T>>,
    pub h2: Vec<Tensor<T>>,
}

impl<T: Scalar> SharedStates<T> {
    /// All-zero states with the right shapes: the ablated model's input.
    pub fn zeros(seq_len: usize, batch: usize, state_dim: usize) -> Self {
        let mk = || {
            (0..seq_len)
                .map(|_| Tensor::zeros(&[batch, state_dim]))
                .collect()
        };
        SharedStates { h1: mk(), h2: mk() }
    }
}

pub struct BiModel<T> {
    pub config: ModelConfig,
    pub dims: VocabDims,
    /// Word embeddings read by the intent network; when embeddings are tied
    /// this is the same storage as `slot_word_embedding`.
    pub word_embedding: Tensor<T>,
    pub slot_word_embedding: Tensor<T>,
    pub intent_net: TaskNetworkIntent<T>,
    pub slot_net: TaskNetworkSlot<T>,
}

impl<T: Scalar> std::fmt::Debug for BiModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BiModel")
            .field("config", &self.config)
            .field("dims", &self.dims)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

impl<T: Scalar> BiModel<T> {
    /// Dimension of one exchanged hidden state (`2 * hidden`).
    pub fn state_dim(&self) -> usize {
        2 * self.config.hidden_dim
    }

    /// Width of the auxiliary input to the slot encoder's first layer.
    fn slot_aux_dim(config: &ModelConfig) -> usize {
        match config.variant {
            // Eq-style feedback: the other network's state plus the previous
            // label embedding enter the encoder directly.
            ModelVariant::WithoutDecoder => 2 * config.hidden_dim + config.label_embed_dim,
            // The decoder consumes the label feedback instead.
            ModelVariant::WithDecoder => 2 * config.hidden_dim,
        }
    }

    /// Deterministic initialization: weights and embeddings uniform in
    /// [-0.1, 0.1] from the seeded generator, biases zero, forget-gate
    /// biases one.
    pub fn new(config: ModelConfig, dims: VocabDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_dim;
        let state = 2 * h;

        let word_embedding: Tensor<T> =
            uniform_param(&mut rng, &[dims.words, config.embed_dim], 0.1);
        let slot_word_embedding = if config.tie_embeddings {
            word_embedding.clone()
        } else {
            uniform_param(&mut rng, &[dims.words, config.embed_dim], 0.1)
        };

        let intent_encoder = BlstmEncoder::init(
            config.embed_dim + state,
            h,
            config.num_layers,
            &mut rng,
        );
        let intent_decoder = match config.variant {
            ModelVariant::WithDecoder => Some(LstmDecoder::init(
                // One step over concat(h1[last], h2[last]).
                2 * state,
                h,
                config.num_layers,
                &mut rng,
            )),
            ModelVariant::WithoutDecoder => None,
        };
        let intent_proj_in = match config.variant {
            ModelVariant::WithDecoder => h,
            ModelVariant::WithoutDecoder => state,
        };
        let intent_proj_w = uniform_param(&mut rng, &[intent_proj_in, dims.intents], 0.1);
        let intent_proj_b = {
            let t = Tensor::zeros(&[dims.intents]);
            t.set_requires_grad(true);
            t
        };

        let label_embedding =
            uniform_param(&mut rng, &[dims.slot_rows, config.label_embed_dim], 0.1);
        let slot_encoder = BlstmEncoder::init(
            config.embed_dim + Self::slot_aux_dim(&config),
            h,
            config.num_layers,
            &mut rng,
        );
        let slot_decoder = match config.variant {
            ModelVariant::WithDecoder => Some(LstmDecoder::init(
                // concat(h2[t-1], h1[t-1], label_embed(y[t-1])).
                2 * state + config.label_embed_dim,
                h,
                config.num_layers,
                &mut rng,
            )),
            ModelVariant::WithoutDecoder => None,
        };
        let slot_proj_in = match config.variant {
            ModelVariant::WithDecoder => h,
            ModelVariant::WithoutDecoder => state,
        };
        let slot_proj_w = uniform_param(&mut rng, &[slot_proj_in, dims.slot_rows], 0.1);
        let slot_proj_b = {
            let t = Tensor::zeros(&[dims.slot_rows]);
            t.set_requires_grad(true);
            t
        };

        BiModel {
            config,
            dims,
            word_embedding,
            slot_word_embedding,
            intent_net: TaskNetworkIntent {
                encoder: intent_encoder,
                decoder: intent_decoder,
                proj_w: intent_proj_w,
                proj_b: intent_proj_b,
            },
            slot_net: TaskNetworkSlot {
                encoder: slot_encoder,
                decoder: slot_decoder,
                label_embedding,
                proj_w: slot_proj_w,
                proj_b: slot_proj_b,
            },
        }
    }

    /// Every parameter with a stable name, in checkpoint order. The tied
    /// word-embedding table appears once.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut params: Vec<(String, Tensor<T>)> =
            vec![("word_embedding".into(), self.word_embedding.clone())];
        if !self.config.tie_embeddings {
            params.push((
                "slot_word_embedding".into(),
                self.slot_word_embedding.clone(),
            ));
        }
        params.extend(self.intent_net.encoder.named_params("intent.encoder"));
        if let Some(dec) = &self.intent_net.decoder {
            params.extend(dec.named_params("intent.decoder"));
        }
        params.push(("intent.proj.weight".into(), self.intent_net.proj_w.clone()));
        params.push(("intent.proj.bias".into(), self.intent_net.proj_b.clone()));
        params.push((
            "slot.label_embedding".into(),
            self.slot_net.label_embedding.clone(),
        ));
        params.extend(self.slot_net.encoder.named_params("slot.encoder"));
        if let Some(dec) = &self.slot_net.decoder {
            params.extend(dec.named_params("slot.decoder"));
        }
        params.push(("slot.proj.weight".into(), self.slot_net.proj_w.clone()));
        params.push(("slot.proj.bias".into(), self.slot_net.proj_b.clone()));
        params
    }

    /// Parameters updated by the intent loss: the intent network plus the
    /// word-embedding table it reads.
    pub fn intent_parameters(&self) -> Vec<Tensor<T>> {
        let mut params = vec![self.word_embedding.clone()];
        params.extend(
            self.intent_net
                .encoder
                .named_params("")
                .into_iter()
                .map(|(_, t)| t),
        );
        if let Some(dec) = &self.intent_net.decoder {
            params.extend(dec.named_params("").into_iter().map(|(_, t)| t));
        }
        params.push(self.intent_net.proj_w.clone());
        params.push(self.intent_net.proj_b.clone());
        params
    }

    /// Parameters updated by the slot loss: the slot network plus the word
    /// embeddings it reads (the shared table when tied).
    pub fn slot_parameters(&self) -> Vec<Tensor<T>> {
        let mut params = vec![self.slot_word_embedding.clone()];
        params.push(self.slot_net.label_embedding.clone());
        params.extend(
            self.slot_net
                .encoder
                .named_params("")
                .into_iter()
                .map(|(_, t)| t),
        );
        if let Some(dec) = &self.slot_net.decoder {
            params.extend(dec.named_params("").into_iter().map(|(_, t)| t));
        }
        params.push(self.slot_net.proj_w.clone());
        params.push(self.slot_net.proj_b.clone());
        params
    }

    /// Intent-network parameters excluding any (possibly shared) embedding
    /// table; the set whose `L2` gradients must vanish identically.
    pub fn intent_only_parameters(&self) -> Vec<(String, Tensor<T>)> {
        self.named_parameters()
            .into_iter()
            .filter(|(name, _)| name.starts_with("intent."))
            .collect()
    }

    /// Slot-network parameters excluding any shared embedding table; the set
    /// whose `L1` gradients must vanish identically.
    pub fn slot_only_parameters(&self) -> Vec<(String, Tensor<T>)> {
        self.named_parameters()
            .into_iter()
            .filter(|(name, _)| name.starts_with("slot."))
            .collect()
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.named_parameters() {
            p.zero_grad();
        }
    }

    /// Snapshot of every parameter's values, keyed by name.
    pub fn snapshot(&self) -> Vec<(String, Vec<T>)> {
        self.named_parameters()
            .into_iter()
            .map(|(name, t)| (name, t.to_vec()))
            .collect()
    }

    pub fn restore(&self, snapshot: &[(String, Vec<T>)]) -> Result<(), ModelError> {
        let params = self.named_parameters();
        if params.len() != snapshot.len() {
            return Err(ModelError::Contract(format!(
                "snapshot has {} parameters, model has {}",
                snapshot.len(),
                params.len()
            )));
        }
        for ((name, tensor), (snap_name, values)) in params.iter().zip(snapshot) {
            if name != snap_name {
                return Err(ModelError::Contract(format!(
                    "snapshot parameter `{snap_name}` does not match model parameter `{name}`"
                )));
            }
            tensor.set_data(values)?;
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Same architecture with cross-network states forced to zero everywhere.
/// Parameter shapes and counts are identical; only the exchanged values
/// change.
pub fn ablate_sharing(mut config: ModelConfig) -> ModelConfig {
    config.share_states = false;
    config
}

#[cfg(test)]
mod tests;
