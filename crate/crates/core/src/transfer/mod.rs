//! Training soft prompts across a task stream: initialization, query
//! fusion and memory replay going forward, gated retraining of earlier
//! prompts going backward.

pub mod backward;
pub mod forward;

pub use backward::{
    accept_update, accepts, backward_transfer_task, gated_gradient, memory_examples, AcceptRecord, BackwardOptions, GateDecision, GateRecord,
    GateStats,
};
pub use forward::{
    cl_init, fuse_memory_queries, fuse_query, select_init, train_task, EpochLog, FusionSample, Schedule, TrainFlags,
};

use std::collections::BTreeMap;

use crate::autodiff::Graph;
use crate::codec::vocab::Vocab;
use crate::codec::{
    format_example, name_format_example, parse_name_format, parse_positional, CodecError, FormattedExample, Query, ValueMap,
};
use crate::metrics::MetricsError;
use crate::model::{Backbone, ModelError, SoftPrompt};
use crate::scalar::Scalar;
use crate::stream::{Dialog, Service, StreamError};

#[derive(Debug, thiserror::Error)]
pub enum TransferError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Precondition(String),
    #[error("training diverged: {0}")]
    Diverged(String),
}

impl From<crate::autodiff::AutodiffError> for TransferError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        Self::Model(e.into())
    }
}

/// A formatted example as token ids; the target ends with the end token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

/// A frozen backbone with its vocabulary.
#[derive(Clone, Debug)]
pub struct PromptModel<T> {
    pub backbone: Backbone<T>,
    pub vocab: Vocab,
    /// Generation budget per asked slot, beyond its sentinel.
    pub max_value_tokens: usize,
}

impl<T: Scalar> PromptModel<T> {
    pub fn new(backbone: Backbone<T>, vocab: Vocab) -> Self {
        Self { backbone, vocab, max_value_tokens: 4 }
    }

    pub fn encode(&self, ex: &FormattedExample) -> Encoded {
        Encoded { input: self.vocab.encode(&ex.input_text), target: self.vocab.encode_target(&ex.target_text) }
    }

    /// Summed target loss of one example.
    pub fn example_loss(&self, prompt: Option<&SoftPrompt<T>>, ex: &Encoded) -> Result<f64, TransferError> {
        Ok(self.backbone.prompted_loss(prompt, &ex.input, &ex.target)?.as_f64())
    }

    /// Total loss over all target tokens divided by their count.
    pub fn mean_token_loss(&self, prompt: Option<&SoftPrompt<T>>, set: &[Encoded]) -> Result<f64, TransferError> {
        if set.is_empty() {
            return Err(TransferError::Precondition("loss over an empty set".into()));
        }
        let mut total = 0.0;
        let mut tokens = 0;
        for ex in set {
            total += self.example_loss(prompt, ex)?;
            tokens += ex.target.len();
        }
        Ok(total / tokens as f64)
    }

    /// Adds `weight * d loss / d prompt` to the prompt's gradient and
    /// returns the unweighted loss.
    pub fn accumulate_prompt_grad(&self, prompt: &mut SoftPrompt<T>, ex: &Encoded, weight: T) -> Result<f64, TransferError> {
        let (grads, pv, loss) = {
            let mut g = Graph::new();
            let b = self.backbone.bind_inference(&mut g);
            let pv = g.leaf(prompt.embeddings(), true);
            let loss = self.backbone.loss_on_graph(&mut g, &b, &ex.input, Some(pv), &ex.target)?;
            let value = g.scalar(loss)?.as_f64();
            let scaled = g.scale(loss, weight)?;
            (g.backward(scaled)?, pv, value)
        };
        prompt.params_mut().absorb(&grads, &[pv])?;
        Ok(loss)
    }

    /// Weighted mean-per-token gradient of a batch; returns the batch's
    /// mean per-token loss.
    pub fn batch_prompt_grad(&self, prompt: &mut SoftPrompt<T>, batch: &[Encoded]) -> Result<f64, TransferError> {
        let tokens: usize = batch.iter().map(|e| e.target.len()).sum();
        if tokens == 0 {
            return Err(TransferError::Precondition("empty batch".into()));
        }
        let w = T::one() / T::from_usize(tokens).unwrap();
        let mut total = 0.0;
        for ex in batch {
            total += self.accumulate_prompt_grad(prompt, ex, w)?;
        }
        if !total.is_finite() {
            return Err(TransferError::Diverged(format!("batch loss {total}")));
        }
        Ok(total / tokens as f64)
    }

    /// Greedy prediction of every query slot, in query order.
    pub fn predict(&self, prompt: Option<&SoftPrompt<T>>, dialog: &str, query: &Query) -> Result<Vec<String>, TransferError> {
        let ex = format_example(dialog, &Default::default(), query);
        let input = self.vocab.encode(&ex.input_text);
        let budget = (query.len() * (1 + self.max_value_tokens) + 1).min(self.backbone.config().max_seq_len);
        let out = self.backbone.generate(prompt, &input, budget)?;
        Ok(parse_positional(&self.vocab.decode(&out), query))
    }

    /// Joint goal accuracy of `prompt` on `dialogs` under `query`.
    pub fn jga(&self, prompt: Option<&SoftPrompt<T>>, dialogs: &[&Dialog], query: &Query) -> Result<f64, TransferError> {
        let mut preds = Vec::with_capacity(dialogs.len());
        let mut golds = Vec::with_capacity(dialogs.len());
        for d in dialogs {
            let p = self.predict(prompt, &d.text, query)?;
            preds.push(query.slots().iter().map(|s| s.name.clone()).zip(p).collect());
            golds.push(query.padded_map(&d.values));
        }
        Ok(crate::metrics::joint_goal_accuracy(&preds, &golds)?)
    }

    /// Formats and encodes `dialogs` under their task's own query.
    pub fn encode_plain(&self, dialogs: &[&Dialog], query: &Query) -> Vec<Encoded> {
        dialogs.iter().map(|d| self.encode(&format_example(&d.text, &d.values, query))).collect()
    }

    /// Encodes `dialogs` of `service` in the chosen target format.
    pub fn encode_task(&self, dialogs: &[&Dialog], service: &Service, name_format: bool) -> Result<Vec<Encoded>, TransferError> {
        if name_format {
            Ok(dialogs.iter().map(|d| self.encode(&name_format_example(&d.text, &service.name, &d.values))).collect())
        } else {
            Ok(self.encode_plain(dialogs, &service.query()?))
        }
    }

    /// Greedy prediction in the `slot = value ; ...` format.
    pub fn predict_named(&self, prompt: Option<&SoftPrompt<T>>, dialog: &str, service: &Service) -> Result<ValueMap, TransferError> {
        let ex = name_format_example(dialog, &service.name, &Default::default());
        let input = self.vocab.encode(&ex.input_text);
        let budget = (service.slots.len() * (3 + self.max_value_tokens) + 1).min(self.backbone.config().max_seq_len);
        let out = self.backbone.generate(prompt, &input, budget)?;
        Ok(parse_name_format(&self.vocab.decode(&out)))
    }

    /// Joint goal accuracy on `service`'s dialogs in the chosen format.
    pub fn task_jga(
        &self,
        prompt: Option<&SoftPrompt<T>>,
        dialogs: &[&Dialog],
        service: &Service,
        name_format: bool,
    ) -> Result<f64, TransferError> {
        let query = service.query()?;
        if !name_format {
            return self.jga(prompt, dialogs, &query);
        }
        let mut preds = Vec::with_capacity(dialogs.len());
        let mut golds = Vec::with_capacity(dialogs.len());
        for d in dialogs {
            preds.push(self.predict_named(prompt, &d.text, service)?);
            golds.push(query.padded_map(&d.values));
        }
        Ok(crate::metrics::joint_goal_accuracy(&preds, &golds)?)
    }
}

/// Trained prompts of completed tasks, in completion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PromptBank<T> {
    prompts: Vec<SoftPrompt<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> PromptBank<T> {
    pub fn new() -> Self {
        Self { prompts: Vec::new(), index: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// Banks the prompt of a newly completed task.
    pub fn insert(&mut self, prompt: SoftPrompt<T>) -> Result<(), TransferError> {
        if self.index.contains_key(&prompt.task_id) {
            return Err(TransferError::Precondition(format!("task `{}` already banked", prompt.task_id)));
        }
        let mut prompt = prompt;
        prompt.params_mut().clear_grads();
        self.index.insert(prompt.task_id.clone(), self.prompts.len());
        self.prompts.push(prompt);
        Ok(())
    }

    pub fn get(&self, task_id: &str) -> Option<&SoftPrompt<T>> {
        self.index.get(task_id).map(|&i| &self.prompts[i])
    }

    pub fn last(&self) -> Option<&SoftPrompt<T>> {
        self.prompts.last()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SoftPrompt<T>> {
        self.prompts.iter()
    }

    /// Swaps in an accepted backward-transfer candidate.
    pub(crate) fn replace(&mut self, prompt: SoftPrompt<T>) -> Result<(), TransferError> {
        let &i = self
            .index
            .get(&prompt.task_id)
            .ok_or_else(|| TransferError::Precondition(format!("task `{}` not banked", prompt.task_id)))?;
        self.prompts[i] = prompt;
        Ok(())
    }

    /// SHA-256 over every banked prompt with its id.
    pub fn digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in &self.prompts {
            h.update(p.task_id.as_bytes());
            h.update(p.digest());
        }
        h.finalize().into()
    }
}
