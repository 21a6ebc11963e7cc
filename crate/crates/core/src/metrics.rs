//! Joint goal accuracy and the continual-learning summary metrics.
//!
//! `a[j][i]` is the accuracy on task `i` after training through task `j`
//! (both 1-based in the formulas, 0-based in code). Avg. JGA averages the
//! final row, FWT the entries just before each task was trained, and BWT
//! the change from just after training to the end.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::codec::vocab::NONE_VALUE;
use crate::codec::{normalize_value, ValueMap};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("{0} predictions for {1} gold examples")]
    LengthMismatch(usize, usize),
    #[error("accuracy entry a[{0}][{1}] missing")]
    Missing(usize, usize),
    #[error("accuracy {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("entry ({0}, {1}) outside a {2}-task matrix")]
    OutOfBounds(usize, usize, usize),
}

/// Fraction of examples whose every slot matches after normalization.
/// Each example is scored over the union of its predicted and gold slots,
/// absent slots reading as `None`.
pub fn joint_goal_accuracy(predictions: &[ValueMap], golds: &[ValueMap]) -> Result<f64, MetricsError> {
    if predictions.len() != golds.len() {
        return Err(MetricsError::LengthMismatch(predictions.len(), golds.len()));
    }
    if golds.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions.iter().zip(golds).filter(|(p, g)| example_correct(p, g)).count();
    Ok(hits as f64 / golds.len() as f64)
}

fn example_correct(pred: &ValueMap, gold: &ValueMap) -> bool {
    let get = |m: &ValueMap, k: &str| normalize_value(m.get(k).map_or(NONE_VALUE, String::as_str));
    pred.keys().chain(gold.keys()).all(|k| get(pred, k) == get(gold, k))
}

/// Sparse `T x T` accuracy matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "StoredMatrix", try_from = "StoredMatrix")]
pub struct AccuracyMatrix {
    tasks: usize,
    entries: BTreeMap<(usize, usize), f64>,
}

/// Serialized form: `[j, i, accuracy]` triples, 0-based.
#[derive(Serialize, Deserialize)]
struct StoredMatrix {
    tasks: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl From<AccuracyMatrix> for StoredMatrix {
    fn from(m: AccuracyMatrix) -> Self {
        Self { tasks: m.tasks, entries: m.entries.into_iter().map(|((j, i), v)| (j, i, v)).collect() }
    }
}

impl TryFrom<StoredMatrix> for AccuracyMatrix {
    type Error = MetricsError;

    fn try_from(s: StoredMatrix) -> Result<Self, MetricsError> {
        let mut m = AccuracyMatrix::new(s.tasks);
        for (j, i, v) in s.entries {
            m.set(j, i, v)?;
        }
        Ok(m)
    }
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self { tasks, entries: BTreeMap::new() }
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn set(&mut self, j: usize, i: usize, acc: f64) -> Result<(), MetricsError> {
        if j >= self.tasks || i >= self.tasks {
            return Err(MetricsError::OutOfBounds(j, i, self.tasks));
        }
        if !(0.0..=1.0).contains(&acc) {
            return Err(MetricsError::OutOfRange(acc));
        }
        self.entries.insert((j, i), acc);
        Ok(())
    }

    pub fn get(&self, j: usize, i: usize) -> Option<f64> {
        self.entries.get(&(j, i)).copied()
    }

    fn need(&self, j: usize, i: usize) -> Result<f64, MetricsError> {
        self.get(j, i).ok_or(MetricsError::Missing(j, i))
    }

    pub fn entries(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }

    /// Rows `j`, columns `i`, blank where not evaluated.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("after_task");
        for i in 0..self.tasks {
            let _ = write!(out, ",task_{}", i + 1);
        }
        out.push('\n');
        for j in 0..self.tasks {
            let _ = write!(out, "{}", j + 1);
            for i in 0..self.tasks {
                match self.get(j, i) {
                    Some(v) => {
                        let _ = write!(out, ",{v}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

pub fn avg_jga(m: &AccuracyMatrix) -> Result<f64, MetricsError> {
    let t = m.tasks;
    if t == 0 {
        return Err(MetricsError::Missing(0, 0));
    }
    let mut sum = 0.0;
    for i in 0..t {
        sum += m.need(t - 1, i)?;
    }
    Ok(sum / t as f64)
}

/// `None` when there are fewer than two tasks.
pub fn fwt(m: &AccuracyMatrix) -> Result<Option<f64>, MetricsError> {
    let t = m.tasks;
    if t < 2 {
        return Ok(None);
    }
    let mut sum = 0.0;
    for i in 1..t {
        sum += m.need(i - 1, i)?;
    }
    Ok(Some(sum / (t - 1) as f64))
}

/// `None` when there are fewer than two tasks.
pub fn bwt(m: &AccuracyMatrix) -> Result<Option<f64>, MetricsError> {
    let t = m.tasks;
    if t < 2 {
        return Ok(None);
    }
    let mut sum = 0.0;
    for i in 0..t - 1 {
        sum += m.need(t - 1, i)? - m.need(i, i)?;
    }
    Ok(Some(sum / (t - 1) as f64))
}

/// One run's metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub seed: u64,
    pub task_order: Vec<String>,
    pub avg_jga: f64,
    pub fwt: Option<f64>,
    pub bwt: Option<f64>,
    /// `"j,i"` (1-based) to accuracy.
    pub matrix: BTreeMap<String, f64>,
    pub tunable_params_per_task: usize,
    pub stored_params_total: usize,
    pub backbone_params: usize,
}

impl MetricsReport {
    /// Without a sequential connection between tasks (`sequential` false)
    /// FWT and BWT are left blank.
    pub fn from_matrix(
        method: &str,
        seed: u64,
        task_order: Vec<String>,
        m: &AccuracyMatrix,
        sequential: bool,
    ) -> Result<Self, MetricsError> {
        Ok(Self {
            method: method.to_string(),
            seed,
            task_order,
            avg_jga: avg_jga(m)?,
            fwt: if sequential { fwt(m)? } else { None },
            bwt: if sequential { bwt(m)? } else { None },
            matrix: m.entries().map(|((j, i), v)| (format!("{},{}", j + 1, i + 1), v)).collect(),
            tunable_params_per_task: 0,
            stored_params_total: 0,
            backbone_params: 0,
        })
    }

    /// Rebuilds the matrix from the keyed entries.
    pub fn matrix(&self) -> Result<AccuracyMatrix, MetricsError> {
        let mut m = AccuracyMatrix::new(self.task_order.len());
        for (k, &v) in &self.matrix {
            let (j, i) = k.split_once(',').ok_or(MetricsError::Missing(0, 0))?;
            let j: usize = j.parse().map_err(|_| MetricsError::Missing(0, 0))?;
            let i: usize = i.parse().map_err(|_| MetricsError::Missing(0, 0))?;
            if j == 0 || i == 0 {
                return Err(MetricsError::OutOfBounds(j, i, m.tasks));
            }
            m.set(j - 1, i - 1, v)?;
        }
        Ok(m)
    }
}
