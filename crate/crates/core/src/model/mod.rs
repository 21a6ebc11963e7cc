//! Encoder-decoder backbone, soft prompts, and backbone manufacture.

mod backbone;
mod checkpoint;
mod pretrain;

pub use backbone::{Backbone, BoundBackbone};
pub use checkpoint::{BackboneCheckpoint, PromptCheckpoint, FORMAT_VERSION};
pub use pretrain::{
    corrupt_fact_values, corrupt_spans, pretrain_backbone, pretrain_backbone_with, reconstruction_accuracy, Corrupted,
    Corruptor, PretrainOptions, PretrainOutcome, RandomSpans, SalientSpans,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, ParamGroup, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{what} length {len} exceeds the limit of {max}")]
    SequenceTooLong { what: &'static str, len: usize, max: usize },
    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(usize),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    /// Soft prompt tokens per task.
    pub prompt_length: usize,
}

impl ModelConfig {
    /// Desk-scale shape with the given vocabulary.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 192,
            prompt_length: 20,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("prompt_length", self.prompt_length),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < self.prompt_length + 8 {
            return Err(ModelError::Config(format!(
                "max_seq_len {} must be at least prompt_length + 8 = {}",
                self.max_seq_len,
                self.prompt_length + 8
            )));
        }
        Ok(())
    }
}

/// Tunable parameters of one soft prompt.
pub fn count_tunable_params(config: &ModelConfig) -> usize {
    config.prompt_length * config.d_model
}

/// `m x d` tunable embeddings appended after the textual input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + for<'d> Deserialize<'d>")]
pub struct SoftPrompt<T> {
    pub task_id: String,
    params: ParamGroup<T>,
}

impl<T: Scalar> SoftPrompt<T> {
    pub fn new(task_id: impl Into<String>, embeddings: Tensor<T>) -> Result<Self, ModelError> {
        if embeddings.shape().len() != 2 {
            return Err(ModelError::Config(format!("prompt shape {:?} is not a matrix", embeddings.shape())));
        }
        if !embeddings.is_finite() {
            return Err(ModelError::Diverged("prompt has non-finite entries".into()));
        }
        Ok(Self { task_id: task_id.into(), params: ParamGroup::new("prompt", vec![embeddings], false) })
    }

    pub fn embeddings(&self) -> &Tensor<T> {
        &self.params.tensors[0]
    }

    pub fn embeddings_mut(&mut self) -> &mut Tensor<T> {
        &mut self.params.tensors[0]
    }

    pub fn params(&self) -> &ParamGroup<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamGroup<T> {
        &mut self.params
    }

    pub fn length(&self) -> usize {
        self.embeddings().shape()[0]
    }

    pub fn width(&self) -> usize {
        self.embeddings().shape()[1]
    }

    pub fn digest(&self) -> [u8; 32] {
        self.embeddings().digest()
    }

    /// Copy carrying a new task id.
    pub fn relabeled(&self, task_id: impl Into<String>) -> Self {
        let mut p = self.clone();
        p.task_id = task_id.into();
        p.params.clear_grads();
        p
    }
}

/// Each prompt row is a copy of a uniformly drawn row of the token
/// embedding table.
pub fn init_prompt_random<T: Scalar>(backbone: &Backbone<T>, task_id: &str, seed: u64) -> SoftPrompt<T> {
    let cfg = backbone.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = backbone.embedding_table();
    let d = cfg.d_model;
    let mut data = Vec::with_capacity(cfg.prompt_length * d);
    for _ in 0..cfg.prompt_length {
        let id = rng.gen_range(0..cfg.vocab_size);
        data.extend_from_slice(table.row(id));
    }
    let t = Tensor::new(vec![cfg.prompt_length, d], data).expect("prompt shape");
    SoftPrompt::new(task_id, t).expect("embedding rows are finite")
}
