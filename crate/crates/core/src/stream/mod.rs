//! Ordered dialog tasks: synthetic generation, corpus files, splits and
//! memory buffers.

mod corpus;
mod generator;
mod memory;

pub use corpus::{export_corpus, ingest_schema_corpus, CorpusFile, IngestReport};
pub use generator::{generate_stream, pretraining_corpus, GeneratorConfig, SLOT_TYPES};
pub use memory::{proportional_budget, sample_memory, MemoryBuffer};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{CodecError, Query, Slot, ValueMap};

#[derive(Debug, thiserror::Error)]
pub enum StreamError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error("service `{service}`: {msg}")]
    Invalid { service: String, msg: String },
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialog {
    pub text: String,
    pub values: ValueMap,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Service {
    pub id: String,
    pub name: String,
    pub slots: Vec<Slot>,
    pub dialogs: Vec<Dialog>,
}

impl Service {
    /// The task's own query over all of its slots.
    pub fn query(&self) -> Result<Query, CodecError> {
        Query::build(self.slots.clone())
    }

    pub fn check(&self) -> Result<(), StreamError> {
        let bad = |msg: String| StreamError::Invalid { service: self.name.clone(), msg };
        if self.slots.is_empty() {
            return Err(bad("no slots".into()));
        }
        for (i, s) in self.slots.iter().enumerate() {
            if self.slots[..i].iter().any(|o| o.name == s.name) {
                return Err(bad(format!("duplicate slot name `{}`", s.name)));
            }
            if s.description.trim().is_empty() {
                return Err(bad(format!("slot `{}` has an empty description", s.name)));
            }
        }
        for (i, d) in self.dialogs.iter().enumerate() {
            if let Some(k) = d.values.keys().find(|k| !self.slots.iter().any(|s| &s.name == *k)) {
                return Err(bad(format!("dialog {i} gives a value for unknown slot `{k}`")));
            }
        }
        Ok(())
    }
}

/// Indices into a service's dialogs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Seeded shuffle, then a 7:1:2 cut.
    pub fn seven_one_two(n: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (n as f64 * 0.7).round() as usize;
        let n_val = ((n as f64 * 0.1).round() as usize).min(n - n_train);
        let test = idx.split_off(n_train + n_val);
        let val = idx.split_off(n_train);
        Self { train: idx, val, test }
    }
}

/// Services in curriculum order with their splits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStream {
    pub services: Vec<Service>,
    pub splits: Vec<Splits>,
    pub split_seed: u64,
}

impl TaskStream {
    /// Splits every service with a seed derived from `split_seed` and its
    /// name, so a service keeps its split under any reordering.
    pub fn new(services: Vec<Service>, split_seed: u64) -> Result<Self, StreamError> {
        for s in &services {
            s.check()?;
        }
        for (i, s) in services.iter().enumerate() {
            if services[..i].iter().any(|o| o.id == s.id) {
                return Err(StreamError::Invalid { service: s.name.clone(), msg: "duplicate service id".into() });
            }
        }
        let splits = services
            .iter()
            .map(|s| Splits::seven_one_two(s.dialogs.len(), split_seed ^ name_hash(&s.id)))
            .collect();
        Ok(Self { services, splits, split_seed })
    }

    pub fn len(&self) -> usize {
        self.services.len()
    }

    pub fn is_empty(&self) -> bool {
        self.services.is_empty()
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.services.iter().map(|s| s.id.clone()).collect()
    }

    pub fn position(&self, task_id: &str) -> Result<usize, StreamError> {
        self.services.iter().position(|s| s.id == task_id).ok_or_else(|| StreamError::UnknownTask(task_id.into()))
    }

    /// Dialogs of task `k`'s split selected by `pick`.
    pub fn dialogs(&self, k: usize, pick: impl Fn(&Splits) -> &Vec<usize>) -> Vec<&Dialog> {
        pick(&self.splits[k]).iter().map(|&i| &self.services[k].dialogs[i]).collect()
    }

    pub fn train(&self, k: usize) -> Vec<&Dialog> {
        self.dialogs(k, |s| &s.train)
    }

    pub fn val(&self, k: usize) -> Vec<&Dialog> {
        self.dialogs(k, |s| &s.val)
    }

    pub fn test(&self, k: usize) -> Vec<&Dialog> {
        self.dialogs(k, |s| &s.test)
    }

    /// The same tasks in the given order of current positions.
    pub fn reordered(&self, order: &[usize]) -> Self {
        Self {
            services: order.iter().map(|&i| self.services[i].clone()).collect(),
            splits: order.iter().map(|&i| self.splits[i].clone()).collect(),
            split_seed: self.split_seed,
        }
    }

    /// Every text the codec can emit for this stream, for vocabulary building.
    pub fn texts(&self) -> Vec<String> {
        let mut out = Vec::new();
        for s in &self.services {
            out.push(s.name.clone());
            for slot in &s.slots {
                out.push(slot.name.clone());
                out.push(slot.description.clone());
            }
            for d in &s.dialogs {
                out.push(d.text.clone());
                out.extend(d.values.values().cloned());
            }
        }
        out
    }
}

/// Reproducibility record of one run's data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub root_seed: u64,
    pub split_seed: u64,
    pub task_order: Vec<String>,
    pub splits: Vec<Splits>,
    /// Memory dialog indices per task id.
    pub memory: std::collections::BTreeMap<String, Vec<usize>>,
    pub memory_seed: u64,
}

/// FNV-1a, stable across platforms and releases.
pub fn name_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_ratio_and_disjointness() {
        for n in [10, 33, 100, 257] {
            let s = Splits::seven_one_two(n, 5);
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            assert!((s.train.len() as f64 - 0.7 * n as f64).abs() <= 1.0);
            assert!((s.val.len() as f64 - 0.1 * n as f64).abs() <= 1.0);
            assert!((s.test.len() as f64 - 0.2 * n as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn service_checks() {
        let mut s = Service {
            id: "a".into(),
            name: "a".into(),
            slots: vec![Slot::new("x", "the x", "a"), Slot::new("x", "another x", "a")],
            dialogs: vec![],
        };
        assert!(s.check().is_err());
        s.slots.pop();
        s.dialogs.push(Dialog { text: "hi".into(), values: [("y".to_string(), "1".to_string())].into() });
        assert!(s.check().is_err());
    }
}
