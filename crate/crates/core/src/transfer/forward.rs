use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Encoded, PromptBank, PromptModel, TransferError};
use crate::autodiff::{Optimizer, OptimizerConfig};
use crate::codec::vocab::{NONE_VALUE, SENTINEL_COUNT};
use crate::codec::{format_positional, Query, Slot};
use crate::model::{init_prompt_random, SoftPrompt};
use crate::scalar::Scalar;
use crate::stream::{Dialog, MemoryBuffer, TaskStream};

/// Copy of the previous task's prompt, or a random one for the first task.
pub fn cl_init<T: Scalar>(
    bank: &PromptBank<T>,
    model: &PromptModel<T>,
    task_id: &str,
    seed: u64,
) -> SoftPrompt<T> {
    match bank.last() {
        Some(p) => p.relabeled(task_id),
        None => init_prompt_random(&model.backbone, task_id, seed),
    }
}

/// Copy of the banked prompt with the lowest mean per-token loss on the
/// new task's validation set, the most recent task winning ties. Falls
/// back to a random prompt when the bank is empty.
pub fn select_init<T: Scalar>(
    bank: &PromptBank<T>,
    model: &PromptModel<T>,
    val: &[Encoded],
    task_id: &str,
    seed: u64,
) -> Result<SoftPrompt<T>, TransferError> {
    if val.is_empty() {
        return Err(TransferError::Precondition("select_init needs a validation set".into()));
    }
    let mut best: Option<(f64, &SoftPrompt<T>)> = None;
    for p in bank.iter() {
        let loss = model.mean_token_loss(Some(p), val)?;
        if best.is_none_or(|(b, _)| loss <= b) {
            best = Some((loss, p));
        }
    }
    Ok(match best {
        Some((_, p)) => p.relabeled(task_id),
        None => init_prompt_random(&model.backbone, task_id, seed),
    })
}

/// A query mixing kept slots of one task with slots injected from others.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionSample {
    pub n1: usize,
    /// Zero when nothing could be injected and the query is unchanged.
    pub n2: usize,
    pub slots: Vec<Slot>,
    /// Targets aligned with `slots`.
    pub values: Vec<String>,
    pub injected: Vec<bool>,
}

impl FusionSample {
    pub fn query(&self) -> Result<Query, TransferError> {
        Ok(Query::build(self.slots.clone())?)
    }
}

/// Keeps `n1 ~ U[1, |own|]` of the example's own slots, adds
/// `n2 ~ U[1, n1]` slots from `pool` and shuffles them into one query.
/// Injected slots answer `None`. Pool slots whose description matches a
/// kept slot's are never injected, and `n2` is further capped by the pool
/// size and the sentinel alphabet. With nothing to inject, the own query
/// is returned unchanged.
pub fn fuse_query(own: &[Slot], pool: &[Slot], dialog: &Dialog, rng: &mut impl Rng) -> FusionSample {
    let candidates: Vec<&Slot> = pool
        .iter()
        .filter(|p| !own.iter().any(|o| o.description == p.description || (o.name == p.name && o.service_id == p.service_id)))
        .collect();
    let value_of = |s: &Slot| dialog.values.get(&s.name).cloned().unwrap_or_else(|| NONE_VALUE.to_string());
    if candidates.is_empty() || own.is_empty() {
        return FusionSample {
            n1: own.len(),
            n2: 0,
            slots: own.to_vec(),
            values: own.iter().map(value_of).collect(),
            injected: vec![false; own.len()],
        };
    }
    let n1 = rng.gen_range(1..=own.len());
    let kept: Vec<&Slot> = own.choose_multiple(rng, n1).collect();
    let n2_max = n1.min(candidates.len()).min(SENTINEL_COUNT.saturating_sub(n1)).max(1);
    let n2 = rng.gen_range(1..=n2_max);
    let added: Vec<&&Slot> = candidates.choose_multiple(rng, n2).collect();
    let mut mixed: Vec<(Slot, String, bool)> = kept
        .into_iter()
        .map(|s| (s.clone(), value_of(s), false))
        .chain(added.into_iter().map(|s| ((*s).clone(), NONE_VALUE.to_string(), true)))
        .collect();
    mixed.shuffle(rng);
    let (slots, rest): (Vec<_>, Vec<_>) = mixed.into_iter().map(|(s, v, i)| (s, (v, i))).unzip();
    let (values, injected) = rest.into_iter().unzip();
    FusionSample { n1, n2, slots, values, injected }
}

/// Fusion for a memory example of task `i`, injecting slots of the other
/// seen tasks `0..=k`.
pub fn fuse_memory_queries(stream: &TaskStream, i: usize, k: usize, dialog: &Dialog, rng: &mut impl Rng) -> FusionSample {
    let pool: Vec<Slot> = (0..=k).filter(|&j| j != i).flat_map(|j| stream.services[j].slots.clone()).collect();
    fuse_query(&stream.services[i].slots, &pool, dialog, rng)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainFlags {
    pub query_fusion: bool,
    pub memory_replay: bool,
    /// Trains on `slot = value` targets after the service name instead of
    /// sentinel-aligned queries.
    pub name_format: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    /// Epochs over the current task plus memory, with fused queries.
    pub phase_a_epochs: usize,
    /// Epochs over the current task alone, with its own query.
    pub phase_b_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without a new best validation loss before a phase stops.
    pub patience: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            phase_a_epochs: 10,
            phase_b_epochs: 10,
            batch_size: 8,
            learning_rate: 0.3,
            patience: 5,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub task: String,
    pub phase: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_jga: f64,
    pub wall_ms: u64,
    /// Examples of the epoch drawn from memory.
    pub memory_examples: usize,
    pub fused_examples: usize,
}

/// One training item: a dialog and the stream index of its task.
struct Item<'s> {
    task: usize,
    dialog: &'s Dialog,
}

/// Trains `prompt` on task `k` of `stream`.
///
/// Phase A runs over the task's training dialogs, joined by the memory of
/// tasks `0..k` when replay is on, each formatted with a fresh fused query
/// when fusion is on. Phase B runs over the task's own dialogs with its own
/// query. Each phase stops early once the validation loss has not improved
/// for `patience` epochs; the prompt with the best validation loss is
/// returned.
#[allow(clippy::too_many_arguments)]
pub fn train_task<T: Scalar>(
    model: &PromptModel<T>,
    prompt: SoftPrompt<T>,
    stream: &TaskStream,
    k: usize,
    memory: &MemoryBuffer,
    flags: TrainFlags,
    schedule: &Schedule,
    seed: u64,
) -> Result<(SoftPrompt<T>, Vec<EpochLog>), TransferError> {
    if schedule.batch_size == 0 || !(schedule.learning_rate > 0.0) {
        return Err(TransferError::Precondition("batch_size and learning_rate must be positive".into()));
    }
    if flags.query_fusion && flags.name_format {
        return Err(TransferError::Precondition("query fusion needs the sentinel format".into()));
    }
    let service = &stream.services[k];
    let train = stream.train(k);
    let val_dialogs = stream.val(k);
    if train.is_empty() {
        return Err(TransferError::Precondition(format!("task `{}` has no training dialogs", service.id)));
    }
    let val = model.encode_task(&val_dialogs, service, flags.name_format)?;
    let own_pool: Vec<Slot> = (0..k).flat_map(|j| stream.services[j].slots.clone()).collect();

    let mut joint: Vec<Item> = train.iter().map(|&d| Item { task: k, dialog: d }).collect();
    if flags.memory_replay {
        for j in 0..k {
            let sid = &stream.services[j].id;
            joint.extend(memory.get(sid).iter().map(|&di| Item { task: j, dialog: &stream.services[j].dialogs[di] }));
        }
    }
    let own: Vec<Item> = train.iter().map(|&d| Item { task: k, dialog: d }).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Optimizer::new(schedule.optimizer.clone());
    let lr = T::lit(schedule.learning_rate);
    let mut prompt = prompt;
    let mut logs = Vec::new();
    let mut best: Option<(f64, SoftPrompt<T>)> = None;

    for (phase, epochs) in [("A", schedule.phase_a_epochs), ("B", schedule.phase_b_epochs)] {
        let mut items: Vec<&Item> = if phase == "A" { joint.iter().collect() } else { own.iter().collect() };
        let mut stale = 0;
        let mut phase_best = f64::INFINITY;
        for epoch in 0..epochs {
            let start = Instant::now();
            items.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            let mut batches = 0;
            let mut fused = 0;
            let mut from_memory = 0;
            for chunk in items.chunks(schedule.batch_size) {
                let mut batch = Vec::with_capacity(chunk.len());
                for it in chunk {
                    from_memory += usize::from(it.task != k);
                    let ex = if phase == "A" && flags.query_fusion {
                        let f = if it.task == k {
                            fuse_query(&service.slots, &own_pool, it.dialog, &mut rng)
                        } else {
                            fuse_memory_queries(stream, it.task, k, it.dialog, &mut rng)
                        };
                        fused += usize::from(f.n2 > 0);
                        format_positional(&it.dialog.text, &f.values, &f.query()?)
                    } else if flags.name_format {
                        let svc = &stream.services[it.task];
                        crate::codec::name_format_example(&it.dialog.text, &svc.name, &it.dialog.values)
                    } else {
                        let q = stream.services[it.task].query()?;
                        crate::codec::format_example(&it.dialog.text, &it.dialog.values, &q)
                    };
                    batch.push(model.encode(&ex));
                }
                loss_sum += model.batch_prompt_grad(&mut prompt, &batch)?;
                batches += 1;
                opt.apply_update(&mut [prompt.params_mut()], lr)?;
                if !prompt.embeddings().is_finite() {
                    return Err(TransferError::Diverged(format!("prompt of `{}` became non-finite", service.id)));
                }
            }
            let val_loss = if val.is_empty() { f64::NAN } else { model.mean_token_loss(Some(&prompt), &val)? };
            let val_jga = if val.is_empty() { f64::NAN } else { model.task_jga(Some(&prompt), &val_dialogs, service, flags.name_format)? };
            logs.push(EpochLog {
                task: service.id.clone(),
                phase: phase.to_string(),
                epoch,
                train_loss: loss_sum / batches as f64,
                val_loss,
                val_jga,
                wall_ms: start.elapsed().as_millis() as u64,
                memory_examples: from_memory,
                fused_examples: fused,
            });
            if val.is_empty() {
                best = Some((f64::NAN, prompt.clone()));
                continue;
            }
            if !val_loss.is_finite() {
                return Err(TransferError::Diverged(format!("validation loss {val_loss} on `{}`", service.id)));
            }
            if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
                best = Some((val_loss, prompt.clone()));
            }
            if val_loss < phase_best {
                phase_best = val_loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= schedule.patience {
                    break;
                }
            }
        }
    }
    let out = best.map_or(prompt, |(_, p)| p);
    Ok((out.relabeled(service.id.clone()), logs))
}
