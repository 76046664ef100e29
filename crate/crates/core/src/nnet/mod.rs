//! Embedding → LSTM → soft-alignment attention → batch norm → dense/ReLU/
//! dropout → dense → softmax, with hand-written reverse-mode gradients.
//!
//! Everything is generic over [`Real`] so that training can run in `f32`
//! while gradient checks run in `f64`.

mod backward;
pub mod batchnorm;
pub mod checkpoint;
mod forward;
pub mod loss;
mod params;
mod tensor;

pub use backward::{backward, backward_from_outputs, batch_loss, output_gradient, LossSpec};
pub use batchnorm::{batchnorm_apply, BatchNormOutput};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{
    absorb_batch_stats, forward_batch, forward_classifier, forward_eval, trunk_features, BatchTrace,
    SequenceTrace,
};
pub use loss::{cce_loss, softmax, triplet_loss, LOG_EPS};
pub use params::ModelParams;
pub use tensor::{axpy, dot, Real, Tensor};

use crate::error::{Error, Result};

/// What the final dense layer produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Head {
    /// Softmax class probabilities.
    Classifier,
    /// Raw embedding vectors, no softmax.
    Embedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm, dropout active.
    Train,
    /// Running statistics, no dropout.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub lstm_hidden: usize,
    pub dense1_units: usize,
    /// Output units of the last dense layer (classes, or embedding size).
    pub n_classes: usize,
    pub dropout_rate: f64,
    pub head: Head,
    /// Quantizer levels the vocabulary was built with (provenance only).
    pub k_levels: u32,
    /// Subsequence length used in training (provenance only).
    pub subseq_len: usize,
}

impl ModelConfig {
    /// Full-size defaults: 128-d embeddings, 768 LSTM units, 384 dense units.
    pub fn new(vocab_size: usize, n_classes: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 128,
            lstm_hidden: 768,
            dense1_units: 384,
            n_classes,
            dropout_rate: 0.3,
            head: Head::Classifier,
            k_levels: 5,
            subseq_len: 5000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 || self.embed_dim == 0 || self.lstm_hidden == 0 || self.dense1_units == 0 {
            return Err(Error::Config(format!(
                "all model dimensions must be positive: {self:?}"
            )));
        }
        let min_outputs = match self.head {
            Head::Classifier => 2,
            Head::Embedding => 1,
        };
        if self.n_classes < min_outputs {
            return Err(Error::Config(format!(
                "{:?} head needs at least {min_outputs} outputs",
                self.head
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub(crate) fn lstm_input(&self) -> usize {
        self.embed_dim + self.lstm_hidden
    }
}
