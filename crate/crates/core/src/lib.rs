//! Multimodal GRU image captioning.
//!
//! A recurrent language model conditioned on a projected image feature:
//! training by per-example SGD with backpropagation through time, greedy
//! caption generation, likelihood-based bidirectional retrieval and the
//! BLEU / METEOR / CIDEr caption metrics.

pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod gru;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod retrieval;
pub mod vocab;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use data::{load_captions, load_features, CaptionDataset, FeatureMap};
pub use decoder::{generate, DecodeConfig};
pub use error::{Error, Result};
pub use gru::{param_count, StackKind, Unit};
pub use linalg::{Matrix, Rng, Vector};
pub use model::{train, ModelDims, ModelParams, TrainConfig};
pub use vocab::Vocabulary;
