//! Tabular data synthesis with autoregressive sequence models.
//!
//! Rows become prompt-prefixed sentences (`codec`), sentences become token
//! ids with a loss mask that skips the prompt (`tokenizer`), a back-off
//! n-gram or a small transformer learns them (`lm`), and `sampler` turns
//! the model back into rows. `partition` splits wide tables, `eval` scores
//! the output, `pipeline` ties the stages together.

pub mod artifact;
pub mod codec;
pub mod eval;
pub mod lm;
pub mod partition;
pub mod pipeline;
pub mod predictor;
pub mod prompt;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod table;
pub mod tokenizer;

pub use artifact::{ModelArtifact, TableState};
pub use codec::{parse_sentence, serialize_row, ParseError, ParseErrorKind, SerializedExample};
pub use lm::{Backend, BackendKind, LanguageModel, NGramModel, NGramParams, NeuralConfig};
pub use partition::{make_partition_plan, PartitionPlan};
pub use prompt::{Metadata, PromptText};
pub use sampler::{GenConfig, GenContext, GenStats, Generated};
pub use scalar::Scalar;
pub use table::{ColumnKind, ColumnSpec, Schema, Table, TaskKind, Value};
pub use tokenizer::{EncodedExample, Vocab};

/// Double-precision transformer, the one persisted in model files.
pub type NeuralModel64 = lm::NeuralModel<f64>;
/// Single-precision transformer.
pub type NeuralModel32 = lm::NeuralModel<f32>;
