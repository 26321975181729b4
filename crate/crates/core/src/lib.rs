//! Table question answering without an intermediate query language.
//!
//! A question and its table are encoded as one sequence
//! (`[CLS] headers cells [SEP] question [SEP]`), run through a small
//! transformer encoder, and a pointer head picks the answer cell directly.
//!
//! The crate is split along the pipeline:
//!
//! - [`data`]: WikiSQL-style ingestion, answer-cell resolution, row-shuffle augmentation
//! - [`text`]: tokenizer and vocabulary
//! - [`encoding`]: the flat input layout and the cell-position map
//! - [`numerics`]: dense matrices with forward/backward kernels and gradient checking
//! - [`model`]: encoder, pointer head, loss, freezing policy
//! - [`training`]: Adam, batching, the training loop, checkpoints
//! - [`evaluation`]: word-match accuracy, synthetic corpora, experiment runner

pub mod data;
pub mod encoding;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod text;
pub mod training;

pub use data::{Aggregation, Comparator, Condition, Example, IngestStats, SourceQuery, Table};
pub use encoding::{encode_example, EncodedInput, Item};
pub use error::{CheckpointError, Error, Result};
pub use evaluation::{EvalReport, SynthConfig};
pub use model::{ModelConfig, ModelParams};
pub use numerics::{Matrix, Scalar};
pub use text::{tokenize, Vocab};
pub use training::{AdamState, TrainConfig};
