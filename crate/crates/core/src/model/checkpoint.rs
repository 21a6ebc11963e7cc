//! JSON checkpoints for prompts and backbones.
//!
//! Values are written as JSON numbers using the shortest representation
//! that parses back to the same `f64`, so save/load is bit-exact for `f64`.
//!
//! Prompt file:
//! ```json
//! {"format_version": 1, "task_id": "svc_03", "m": 20, "d": 64, "values": [...]}
//! ```
//! `values` holds `m * d` reals, row `i` of the prompt at `values[i*d..(i+1)*d]`.
//!
//! Backbone file:
//! ```json
//! {"format_version": 1, "config": {...}, "vocab": ["<pad>", ...],
//!  "groups": [{"name": "embed", "frozen": true,
//!              "tensors": [{"shape": [V, d], "values": [...]}]}, ...]}
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Backbone, ModelConfig, ModelError, SoftPrompt};
use crate::autodiff::{ParamGroup, Tensor};
use crate::scalar::Scalar;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptCheckpoint {
    pub format_version: u32,
    pub task_id: String,
    pub m: usize,
    pub d: usize,
    pub values: Vec<f64>,
}

impl PromptCheckpoint {
    pub fn from_prompt<T: Scalar>(p: &SoftPrompt<T>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            task_id: p.task_id.clone(),
            m: p.length(),
            d: p.width(),
            values: p.embeddings().data().iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn to_prompt<T: Scalar>(&self) -> Result<SoftPrompt<T>, ModelError> {
        if self.format_version != FORMAT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported format_version {}", self.format_version)));
        }
        let t = Tensor::new(vec![self.m, self.d], self.values.iter().map(|&v| T::lit(v)).collect())?;
        SoftPrompt::new(self.task_id.clone(), t)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredGroup {
    pub name: String,
    pub frozen: bool,
    pub tensors: Vec<StoredTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneCheckpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    /// Token strings indexed by id.
    pub vocab: Vec<String>,
    pub groups: Vec<StoredGroup>,
}

impl BackboneCheckpoint {
    pub fn from_backbone<T: Scalar>(b: &Backbone<T>, vocab: Vec<String>) -> Self {
        let groups = b
            .groups()
            .iter()
            .map(|g| StoredGroup {
                name: g.name.clone(),
                frozen: g.frozen,
                tensors: g
                    .tensors
                    .iter()
                    .map(|t| StoredTensor {
                        shape: t.shape().to_vec(),
                        values: t.data().iter().map(|v| v.as_f64()).collect(),
                    })
                    .collect(),
            })
            .collect();
        Self { format_version: FORMAT_VERSION, config: b.config().clone(), vocab, groups }
    }

    pub fn to_backbone<T: Scalar>(&self) -> Result<Backbone<T>, ModelError> {
        if self.format_version != FORMAT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported format_version {}", self.format_version)));
        }
        if self.vocab.len() != self.config.vocab_size {
            return Err(ModelError::Checkpoint(format!(
                "vocab of {} tokens for vocab_size {}",
                self.vocab.len(),
                self.config.vocab_size
            )));
        }
        let groups = self
            .groups
            .iter()
            .map(|g| {
                let tensors = g
                    .tensors
                    .iter()
                    .map(|t| Tensor::new(t.shape.clone(), t.values.iter().map(|&v| T::lit(v)).collect()))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(ParamGroup::new(g.name.clone(), tensors, g.frozen))
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        Backbone::from_groups(self.config.clone(), groups)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_prompt_random;

    fn tiny() -> ModelConfig {
        ModelConfig { vocab_size: 25, d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, max_seq_len: 24, prompt_length: 3 }
    }

    #[test]
    fn backbone_round_trip_is_lossless() {
        let mut bb = Backbone::<f64>::init(tiny(), 11).unwrap();
        bb.freeze();
        let vocab: Vec<String> = (0..25).map(|i| format!("w{i}")).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.json");
        BackboneCheckpoint::from_backbone(&bb, vocab.clone()).save(&path).unwrap();
        let ck = BackboneCheckpoint::load(&path).unwrap();
        assert_eq!(ck.vocab, vocab);
        let back: Backbone<f64> = ck.to_backbone().unwrap();
        assert_eq!(back.digest(), bb.digest());
        assert!(back.is_frozen());
    }

    #[test]
    fn prompt_round_trip_is_lossless() {
        let bb = Backbone::<f64>::init(tiny(), 12).unwrap();
        let mut p = init_prompt_random(&bb, "svc", 4);
        p.embeddings_mut().data_mut()[0] = 1.0 / 3.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        PromptCheckpoint::from_prompt(&p).save(&path).unwrap();
        let back: SoftPrompt<f64> = PromptCheckpoint::load(&path).unwrap().to_prompt().unwrap();
        assert_eq!(back.digest(), p.digest());
        assert_eq!(back.task_id, "svc");
    }

    #[test]
    fn rejects_mismatched_layout() {
        let bb = Backbone::<f64>::init(tiny(), 13).unwrap();
        let mut ck = BackboneCheckpoint::from_backbone(&bb, (0..25).map(|i| i.to_string()).collect());
        ck.groups.pop();
        assert!(ck.to_backbone::<f64>().is_err());
    }
}
