#![allow(dead_code)]

pub mod gradcheck;

use std::path::Path;
use std::sync::OnceLock;

use cpt_core::model::PretrainOptions;
use cpt_core::runner::{load_stream, prepare_backbone, ExperimentConfig, ModelShape, PretrainSpec, StreamSource};
use cpt_core::stream::{GeneratorConfig, TaskStream};
use cpt_core::transfer::PromptModel;

pub struct Fixture {
    pub stream: TaskStream,
    pub model: PromptModel<f64>,
    pub config: ExperimentConfig,
    _dir: tempfile::TempDir,
}

/// Four short tasks and a quickly pre-trained 16-wide backbone.
pub fn small_config(output_dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        stream: StreamSource::Generate(GeneratorConfig {
            n_services: 4,
            min_slots: 2,
            max_slots: 3,
            min_samples: 40,
            max_samples: 40,
            seed: 3,
            ..Default::default()
        }),
        model: ModelShape { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, max_seq_len: 96, prompt_length: 4 },
        pretrain: PretrainSpec {
            corpus_sentences: 3000,
            options: PretrainOptions { steps: 1500, learning_rate: 3e-3, warmup_steps: 20, ..Default::default() },
            ..Default::default()
        },
        seeds: vec![1],
        output_dir: output_dir.to_path_buf(),
        ..Default::default()
    }
}

pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path());
        let stream = load_stream(&config.stream).unwrap();
        let model = prepare_backbone(&config, &stream).unwrap();
        Fixture { stream, model, config, _dir: dir }
    })
}
