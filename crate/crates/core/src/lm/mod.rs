//! Autoregressive next-token models.

pub mod neural;
pub mod ngram;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::{EncodedExample, BOS, PAD, UNK};

pub use neural::{AdamConfig, NeuralConfig, NeuralModel};
pub use ngram::{CountStore, NGramModel, NGramParams, StoreKind};

#[derive(Debug, Error, PartialEq)]
pub enum LmError {
    #[error("no training examples")]
    EmptyCorpus,
    #[error("order must be at least 1")]
    BadOrder,
    #[error("sequence of {len} tokens exceeds the context cap of {cap}")]
    ContextOverflow { len: usize, cap: usize },
    #[error("example has no unmasked position")]
    EmptyLossMask,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
}

/// Tokens that may never be generated.
pub fn is_banned(id: u32) -> bool {
    id == PAD || id == UNK || id == BOS
}

/// Next-token scoring contract shared by both backends.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;

    /// Unnormalized log-scores for the token following `prefix`. Tokens that
    /// must never be emitted carry `-inf`.
    fn next_logits(&self, prefix: &[u32]) -> Result<Vec<f64>, LmError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendKind {
    NGram,
    Neural,
}

/// Fine-tuning/training schedule for the neural backend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate when continuing from a
    /// pre-trained state.
    pub finetune_lr_scale: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            learning_rate: 5e-4,
            finetune_lr_scale: 0.1,
        }
    }
}

/// A trained model of either kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Backend {
    NGram(NGramModel),
    Neural(NeuralModel<f64>),
}

impl Backend {
    pub fn kind(&self) -> BackendKind {
        match self {
            Backend::NGram(_) => BackendKind::NGram,
            Backend::Neural(_) => BackendKind::Neural,
        }
    }

    /// Grows the output space to `vocab_size` tokens.
    pub fn resize_vocab(&mut self, vocab_size: usize) {
        match self {
            Backend::NGram(m) => m.resize_vocab(vocab_size),
            Backend::Neural(m) => m.resize_vocab(vocab_size),
        }
    }

    /// Whether any pre-training state exists.
    pub fn is_pretrained(&self) -> bool {
        match self {
            Backend::NGram(m) => !m.pretrain().is_empty(),
            Backend::Neural(m) => m.steps_trained() > 0,
        }
    }

    pub fn pretrain(&mut self, examples: &[EncodedExample], schedule: &TrainSchedule, seed: u64) -> Result<Vec<f64>, LmError> {
        match self {
            Backend::NGram(m) => {
                m.fit(examples, StoreKind::Pretrain)?;
                Ok(Vec::new())
            }
            Backend::Neural(m) => m.fit(examples, schedule.steps, schedule.batch_size, schedule.learning_rate, seed),
        }
    }

    /// N-gram: counts go to the fine-tune store. Neural: optimization
    /// continues, at a reduced rate when pre-trained.
    pub fn finetune(&mut self, examples: &[EncodedExample], schedule: &TrainSchedule, seed: u64) -> Result<Vec<f64>, LmError> {
        match self {
            Backend::NGram(m) => {
                m.fit(examples, StoreKind::Finetune)?;
                Ok(Vec::new())
            }
            Backend::Neural(m) => {
                let lr = if m.steps_trained() > 0 {
                    schedule.learning_rate * schedule.finetune_lr_scale
                } else {
                    schedule.learning_rate
                };
                m.fit(examples, schedule.steps, schedule.batch_size, lr, seed)
            }
        }
    }
}

impl LanguageModel for Backend {
    fn vocab_size(&self) -> usize {
        match self {
            Backend::NGram(m) => m.vocab_size(),
            Backend::Neural(m) => m.vocab_size(),
        }
    }

    fn next_logits(&self, prefix: &[u32]) -> Result<Vec<f64>, LmError> {
        match self {
            Backend::NGram(m) => m.next_logits(prefix),
            Backend::Neural(m) => m.next_logits(prefix),
        }
    }
}
