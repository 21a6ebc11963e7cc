use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Encoded, PromptBank, PromptModel, TransferError};
use crate::autodiff::{dot, Optimizer, OptimizerConfig};
use crate::model::SoftPrompt;
use crate::scalar::Scalar;
use crate::stream::{Dialog, Service, TaskStream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub dot_product: f64,
    pub applied: bool,
}

/// `g_ori` when it agrees with `g_ref` (strictly positive inner product),
/// otherwise zeros.
pub fn gated_gradient<T: Scalar>(g_ori: &[T], g_ref: &[T]) -> Result<(Vec<T>, GateDecision), TransferError> {
    if g_ori.len() != g_ref.len() {
        return Err(TransferError::Precondition(format!(
            "gradient lengths differ: {} vs {}",
            g_ori.len(),
            g_ref.len()
        )));
    }
    if !g_ori.iter().chain(g_ref).all(|v| v.is_finite()) {
        return Err(TransferError::Diverged("non-finite gradient entering the gate".into()));
    }
    let d = dot(g_ori, g_ref).as_f64();
    let applied = d > 0.0;
    let out = if applied { g_ori.to_vec() } else { vec![T::zero(); g_ori.len()] };
    Ok((out, GateDecision { dot_product: d, applied }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackwardOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Plain gradient steps keep the gate's first-order guarantee; rejected
    /// steps leave the optimizer untouched.
    pub optimizer: OptimizerConfig,
    /// Records the candidate's memory loss after every step (costly).
    pub track_memory_loss: bool,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self { epochs: 5, batch_size: 8, learning_rate: 0.1, optimizer: OptimizerConfig::sgd(), track_memory_loss: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub prev_task: String,
    pub step: usize,
    pub dot: f64,
    pub applied: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    pub steps: usize,
    pub applied: usize,
    pub records: Vec<GateRecord>,
}

impl GateStats {
    pub fn applied_fraction(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.applied as f64 / self.steps as f64
        }
    }
}

/// Retrains a copy of `p_i` on current-task batches, stepping only when
/// the batch gradient agrees with a memory batch gradient of task `i`.
/// `current` is task `k`'s data under its own query and `memory` task
/// `i`'s stored examples under task `i`'s query.
pub fn backward_transfer_task<T: Scalar>(
    model: &PromptModel<T>,
    p_i: &SoftPrompt<T>,
    current: &[Encoded],
    memory: &[Encoded],
    options: &BackwardOptions,
    seed: u64,
) -> Result<(SoftPrompt<T>, GateStats), TransferError> {
    if memory.is_empty() {
        return Err(TransferError::Precondition(format!("no memory for task `{}`", p_i.task_id)));
    }
    if options.batch_size == 0 || !(options.learning_rate > 0.0) {
        return Err(TransferError::Precondition("batch_size and learning_rate must be positive".into()));
    }
    let mut cand = p_i.relabeled(p_i.task_id.clone());
    let mut stats = GateStats::default();
    if options.epochs == 0 || current.is_empty() {
        return Ok((cand, stats));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Optimizer::new(options.optimizer.clone());
    let lr = T::lit(options.learning_rate);
    let mut order: Vec<usize> = (0..current.len()).collect();
    let mut mem_order: Vec<usize> = (0..memory.len()).collect();
    let mut mem_cursor = memory.len();

    for _ in 0..options.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(options.batch_size) {
            let batch: Vec<Encoded> = chunk.iter().map(|&j| current[j].clone()).collect();
            let mut mem_batch = Vec::with_capacity(options.batch_size);
            while mem_batch.len() < options.batch_size.min(memory.len()) {
                if mem_cursor == mem_order.len() {
                    mem_order.shuffle(&mut rng);
                    mem_cursor = 0;
                }
                mem_batch.push(memory[mem_order[mem_cursor]].clone());
                mem_cursor += 1;
            }
            model.batch_prompt_grad(&mut cand, &batch)?;
            let g_ori = cand.params_mut().flat_grad().expect("gradient just computed");
            cand.params_mut().clear_grads();
            model.batch_prompt_grad(&mut cand, &mem_batch)?;
            let g_ref = cand.params_mut().flat_grad().expect("gradient just computed");
            cand.params_mut().clear_grads();

            let (g, decision) = gated_gradient(&g_ori, &g_ref)?;
            if decision.applied {
                cand.params_mut().set_flat_grad(&g)?;
                opt.apply_update(&mut [cand.params_mut()], lr)?;
                stats.applied += 1;
            }
            let memory_loss =
                if options.track_memory_loss { Some(model.mean_token_loss(Some(&cand), memory)?) } else { None };
            stats.records.push(GateRecord {
                prev_task: p_i.task_id.clone(),
                step: stats.steps,
                dot: decision.dot_product,
                applied: decision.applied,
                memory_loss,
            });
            stats.steps += 1;
        }
    }
    Ok((cand, stats))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcceptRecord {
    pub prev_task: String,
    pub old_loss: f64,
    pub new_loss: f64,
    pub old_jga: f64,
    pub new_jga: f64,
    pub accepted: bool,
}

/// Strictly lower memory loss and no lower memory accuracy.
pub fn accepts(old_loss: f64, new_loss: f64, old_jga: f64, new_jga: f64) -> bool {
    new_loss < old_loss && new_jga >= old_jga
}

/// Replaces the banked prompt of the candidate's task when [`accepts`]
/// holds on the task's memory.
pub fn accept_update<T: Scalar>(
    model: &PromptModel<T>,
    bank: &mut PromptBank<T>,
    candidate: SoftPrompt<T>,
    memory: &[&Dialog],
    service: &Service,
    name_format: bool,
) -> Result<AcceptRecord, TransferError> {
    let old = bank
        .get(&candidate.task_id)
        .ok_or_else(|| TransferError::Precondition(format!("task `{}` not banked", candidate.task_id)))?;
    if memory.is_empty() {
        return Err(TransferError::Precondition(format!("no memory for task `{}`", candidate.task_id)));
    }
    let enc = model.encode_task(memory, service, name_format)?;
    let old_loss = model.mean_token_loss(Some(old), &enc)?;
    let new_loss = model.mean_token_loss(Some(&candidate), &enc)?;
    let old_jga = model.task_jga(Some(old), memory, service, name_format)?;
    let new_jga = model.task_jga(Some(&candidate), memory, service, name_format)?;
    let accepted = accepts(old_loss, new_loss, old_jga, new_jga);
    let record = AcceptRecord { prev_task: candidate.task_id.clone(), old_loss, new_loss, old_jga, new_jga, accepted };
    if accepted {
        bank.replace(candidate)?;
    }
    Ok(record)
}

/// Stored dialogs of task `i` and their encodings in its own format.
pub fn memory_examples<'s, T: Scalar>(
    model: &PromptModel<T>,
    stream: &'s TaskStream,
    i: usize,
    indices: &[usize],
    name_format: bool,
) -> Result<(Vec<Encoded>, Vec<&'s Dialog>), TransferError> {
    let svc = &stream.services[i];
    let dialogs: Vec<&Dialog> = indices.iter().map(|&j| &svc.dialogs[j]).collect();
    Ok((model.encode_task(&dialogs, svc, name_format)?, dialogs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gate_cases() {
        let (g, d) = gated_gradient(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(g, vec![1.0, 2.0]);
        assert!(d.applied);
        assert_eq!(d.dot_product, 5.0);
        let (g, d) = gated_gradient(&[1.0, -3.0], &[-1.0, 3.0]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        assert!(!d.applied);
        let (g, d) = gated_gradient(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        assert!(!d.applied);
        assert!(gated_gradient(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn acceptance_rule() {
        assert!(!accepts(1.0, 1.0, 0.5, 0.5));
        assert!(accepts(1.0, 0.9, 0.5, 0.5));
        assert!(!accepts(1.0, 0.9, 0.5, 0.4));
        assert!(accepts(1.0, 0.9, 0.5, 0.75));
        assert!(!accepts(1.0, 1.1, 0.5, 0.75));
    }

    proptest! {
        #[test]
        fn gate_passes_iff_positive(a in prop::collection::vec(-3i32..=3, 1..8), b in prop::collection::vec(-3i32..=3, 1..8)) {
            let n = a.len().min(b.len());
            let a: Vec<f64> = a[..n].iter().map(|&x| x as f64).collect();
            let b: Vec<f64> = b[..n].iter().map(|&x| x as f64).collect();
            let d: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let (g, dec) = gated_gradient(&a, &b).unwrap();
            prop_assert_eq!(dec.applied, d > 0.0);
            if d > 0.0 {
                prop_assert_eq!(g, a);
            } else {
                prop_assert!(g.iter().all(|&x| x == 0.0));
            }
        }
    }
}
