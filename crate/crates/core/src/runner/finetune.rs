use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::run::{drive, Learner, TaskRecords};
use super::{derive_seed, RunError};
use crate::autodiff::{Optimizer, OptimizerConfig};
use crate::codec::name_format_example;
use crate::metrics::AccuracyMatrix;
use crate::scalar::Scalar;
use crate::stream::{sample_memory, Dialog, MemoryBuffer, TaskStream};
use crate::transfer::{Encoded, EpochLog, PromptModel, TransferError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for FinetuneSchedule {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 8, learning_rate: 1e-3, patience: 5, optimizer: OptimizerConfig::default() }
    }
}

/// Trains the unfrozen backbone on task `k` in the `slot = value` format,
/// joined by the stored dialogs of tasks `0..k` when `replay` is set. Keeps
/// the weights with the best validation loss.
#[allow(clippy::too_many_arguments)]
pub fn finetune_task<T: Scalar>(
    model: &mut PromptModel<T>,
    stream: &TaskStream,
    k: usize,
    memory: &MemoryBuffer,
    replay: bool,
    schedule: &FinetuneSchedule,
    seed: u64,
) -> Result<Vec<EpochLog>, TransferError> {
    if model.backbone.is_frozen() {
        return Err(TransferError::Precondition("fine-tuning needs an unfrozen backbone".into()));
    }
    if schedule.batch_size == 0 || !(schedule.learning_rate > 0.0) {
        return Err(TransferError::Precondition("batch_size and learning_rate must be positive".into()));
    }
    let service = &stream.services[k];
    let mut items: Vec<(usize, &Dialog)> = stream.train(k).into_iter().map(|d| (k, d)).collect();
    if items.is_empty() {
        return Err(TransferError::Precondition(format!("task `{}` has no training dialogs", service.id)));
    }
    if replay {
        for j in 0..k {
            let svc = &stream.services[j];
            items.extend(memory.get(&svc.id).iter().map(|&i| (j, &svc.dialogs[i])));
        }
    }
    let encoded: Vec<(usize, Encoded)> = items
        .iter()
        .map(|&(j, d)| (j, model.encode(&name_format_example(&d.text, &stream.services[j].name, &d.values))))
        .collect();
    let val_dialogs = stream.val(k);
    let val = model.encode_task(&val_dialogs, service, true)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Optimizer::new(schedule.optimizer.clone());
    let lr = T::lit(schedule.learning_rate);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut logs = Vec::new();
    let mut best: Option<(f64, crate::model::Backbone<T>)> = None;
    let mut stale = 0;

    for epoch in 0..schedule.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(schedule.batch_size) {
            let tokens: usize = chunk.iter().map(|&i| encoded[i].1.target.len()).sum();
            let w = T::one() / T::from_usize(tokens).unwrap();
            let mut total = 0.0;
            for &i in chunk {
                let ex = &encoded[i].1;
                total += model.backbone.accumulate_grad(&ex.input, &ex.target, w)?;
            }
            if !total.is_finite() {
                return Err(TransferError::Diverged(format!("fine-tuning loss {total} on `{}`", service.id)));
            }
            loss_sum += total / tokens as f64;
            batches += 1;
            let mut groups: Vec<&mut _> = model.backbone.groups_mut().iter_mut().collect();
            opt.apply_update(&mut groups, lr)?;
        }
        let (val_loss, val_jga) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (model.mean_token_loss(None, &val)?, model.task_jga(None, &val_dialogs, service, true)?)
        };
        logs.push(EpochLog {
            task: service.id.clone(),
            phase: "finetune".into(),
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss,
            val_jga,
            wall_ms: start.elapsed().as_millis() as u64,
            memory_examples: encoded.iter().filter(|(j, _)| *j != k).count(),
            fused_examples: 0,
        });
        if val.is_empty() {
            continue;
        }
        if !val_loss.is_finite() {
            return Err(TransferError::Diverged(format!("validation loss {val_loss} on `{}`", service.id)));
        }
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.backbone.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= schedule.patience {
                break;
            }
        }
    }
    if let Some((_, b)) = best {
        model.backbone = b;
    }
    Ok(logs)
}

/// One shared backbone trained across the stream, optionally replaying
/// `capacity` stored dialogs per earlier task.
pub(crate) struct FinetuneLearner<'a> {
    pub model: PromptModel<f64>,
    pub stream: &'a TaskStream,
    pub memory: MemoryBuffer,
    pub capacities: Vec<usize>,
    pub replay: bool,
    pub schedule: FinetuneSchedule,
    pub seed: u64,
}

impl Learner for FinetuneLearner<'_> {
    fn zero_shot(&self, j: usize) -> Result<f64, RunError> {
        self.eval(j)
    }

    fn train(&mut self, j: usize) -> Result<TaskRecords, RunError> {
        let seed = derive_seed(self.seed, "finetune", j as u64);
        let logs = finetune_task(&mut self.model, self.stream, j, &self.memory, self.replay, &self.schedule, seed)?;
        if self.replay {
            let mem_seed = derive_seed(self.seed, "memory", 0);
            self.memory.insert(&self.stream.services[j].id, sample_memory(self.stream, j, self.capacities[j], mem_seed));
        }
        Ok(TaskRecords { epochs: logs, ..Default::default() })
    }

    fn eval(&self, i: usize) -> Result<f64, RunError> {
        let svc = &self.stream.services[i];
        Ok(self.model.task_jga(None, &self.stream.test(i), svc, true)?)
    }
}

/// Sequential fine-tuning over `stream` in its given order. Returns the
/// diagonal, the zero-shot entries and the final row.
pub fn baseline_finetune(
    model: PromptModel<f64>,
    stream: &TaskStream,
    capacity: usize,
    replay: bool,
    schedule: &FinetuneSchedule,
    seed: u64,
) -> Result<AccuracyMatrix, RunError> {
    let mut model = model;
    model.backbone.unfreeze();
    let mut learner = FinetuneLearner {
        model,
        stream,
        memory: MemoryBuffer::default(),
        capacities: vec![capacity; stream.len()],
        replay,
        schedule: schedule.clone(),
        seed,
    };
    let mut m = AccuracyMatrix::new(stream.len());
    drive(&mut learner, stream.len(), true, false, 0, usize::MAX, &mut m, |_, _, _, _| Ok(()))?;
    Ok(m)
}
