//! Raga recognition as sequence classification, and melodic retrieval by
//! triplet-trained embeddings.
//!
//! The pipeline runs audio → pitch contour → tonic-normalized token sequence
//! → subsequence sampling → LSTM/attention classifier (or embedding ranker)
//! → voted whole-recording inference and retrieval evaluation.

pub mod classify;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod nnet;
pub mod pitch;
pub mod rank;
pub mod sampling;
pub mod tokenize;
pub mod train;
pub mod wav;

pub use error::{Error, Result};

pub use classify::{classify_recording, ensemble_probs, Classifier, Outcome, Verdict};
pub use corpus::{Dataset, ManifestEntry, SynthConfig};
pub use nnet::{Head, Mode, ModelConfig, ModelParams, Real};
pub use pitch::{PitchConfig, PitchContour};
pub use rank::{EmbeddingIndex, RankerConfig, SubsequencePool, Triplet};
pub use sampling::SamplerConfig;
pub use tokenize::{QuantizerConfig, TokenSequence, Vocabulary};
pub use train::{TrainConfig, TrainReport};
