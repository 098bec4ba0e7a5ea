//! Bi-model BLSTM semantic frame parser.
//!
//! Two cross-connected bidirectional LSTM task networks — one for intent
//! detection, one for slot filling — exchange detached hidden states and are
//! trained asynchronously on separate cross-entropy losses. The crate also
//! carries everything needed to run the model end to end: a small
//! reverse-mode autodiff tensor engine, corpus ingestion for CoNLL/JSONL
//! intent+slot data, chunk-level F1 and intent-accuracy evaluation, a
//! training loop with early stopping, and a versioned checkpoint format.

pub mod bimodel;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod metrics;
pub mod rnn;
pub mod tensor;

pub use bimodel::{BiModel, SharedStates, VocabDims};
pub use config::{ModelConfig, ModelVariant, TrainConfig};
pub use data::{Batch, Utterance, Vocabulary};
pub use metrics::EvalReport;
pub use tensor::{AdamState, Scalar, Tape, Tensor, TensorError};
