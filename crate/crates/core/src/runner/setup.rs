use std::path::Path;

use super::{ExperimentConfig, RunError, StreamSource};
use crate::codec::vocab::{Vocab, SEP};
use crate::model::{pretrain_backbone_with, BackboneCheckpoint, PretrainOutcome, SalientSpans};
use crate::stream::{generate_stream, ingest_schema_corpus, pretraining_corpus, GeneratorConfig, TaskStream};
use crate::transfer::PromptModel;

/// Pre-trained backbone written next to the runs.
pub const BACKBONE_FILE: &str = "backbone.json";

pub fn load_stream(source: &StreamSource) -> Result<TaskStream, RunError> {
    match source {
        StreamSource::Generate(g) => Ok(generate_stream(g)?),
        StreamSource::Ingest { path, split_seed } => {
            let (stream, report) = ingest_schema_corpus(path, *split_seed)?;
            if report.skipped_multi_service > 0 {
                eprintln!("skipped {} multi-service dialogs in {}", report.skipped_multi_service, path.display());
            }
            Ok(stream)
        }
    }
}

fn corpus_generator(source: &StreamSource) -> GeneratorConfig {
    match source {
        StreamSource::Generate(g) => g.clone(),
        StreamSource::Ingest { .. } => GeneratorConfig::default(),
    }
}

pub fn build_vocab(stream: &TaskStream, corpus: &[String]) -> Vocab {
    let texts = stream.texts();
    Vocab::build(texts.iter().chain(corpus).map(String::as_str))
}

/// Loads the configured checkpoint, or the one already in the output
/// directory, or pre-trains a fresh backbone and saves it there.
pub fn prepare_backbone(config: &ExperimentConfig, stream: &TaskStream) -> Result<PromptModel<f64>, RunError> {
    let saved = config.output_dir.join(BACKBONE_FILE);
    let existing = config.pretrain.checkpoint.clone().or_else(|| saved.exists().then(|| saved.clone()));
    let model = match existing {
        Some(path) => load_backbone(&path, config)?,
        None => {
            let (model, outcome) = pretrain(config, stream)?;
            if let Some(w) = &outcome.warning {
                eprintln!("warning: {w}");
            }
            std::fs::create_dir_all(&config.output_dir).map_err(RunError::io(&config.output_dir))?;
            BackboneCheckpoint::from_backbone(&model.backbone, model.vocab.tokens().to_vec()).save(&saved)?;
            model
        }
    };
    let missing: usize = stream.texts().iter().map(|t| model.vocab.count_unknown(t)).sum();
    if missing > 0 {
        return Err(RunError::Config(format!("backbone vocabulary lacks {missing} word occurrences of the stream")));
    }
    Ok(model)
}

fn load_backbone(path: &Path, config: &ExperimentConfig) -> Result<PromptModel<f64>, RunError> {
    let ck = BackboneCheckpoint::load(path)?;
    let want = config.model.with_vocab(ck.config.vocab_size);
    if ck.config != want {
        return Err(RunError::Config(format!(
            "checkpoint {} has shape {:?}, configuration asks for {:?}",
            path.display(),
            ck.config,
            want
        )));
    }
    let mut backbone = ck.to_backbone::<f64>()?;
    backbone.freeze();
    Ok(PromptModel::new(backbone, Vocab::from(ck.vocab)))
}

pub(crate) fn pretrain(
    config: &ExperimentConfig,
    stream: &TaskStream,
) -> Result<(PromptModel<f64>, PretrainOutcome<f64>), RunError> {
    let spec = &config.pretrain;
    let corpus = pretraining_corpus(&corpus_generator(&config.stream), spec.corpus_sentences, spec.fact_share, spec.corpus_seed)?;
    let vocab = build_vocab(stream, &corpus);
    let model_config = config.model.with_vocab(vocab.len());
    let seqs: Vec<Vec<usize>> = corpus
        .iter()
        .map(|s| vocab.encode(s))
        .filter(|s| !s.is_empty() && s.len() <= model_config.max_seq_len)
        .collect();
    let id = |w: &str| vocab.id(w).ok_or_else(|| RunError::Config(format!("codec word `{w}` missing from vocabulary")));
    let mut corruptor = SalientSpans { colon: id(":")?, period: id(".")?, sep: SEP, rate: spec.fact_mask_rate };
    let outcome = pretrain_backbone_with(&seqs, model_config, spec.init_seed, &spec.options, &mut corruptor)?;
    let model = PromptModel::new(outcome.backbone.clone(), vocab);
    Ok((model, outcome))
}
