//! Manufactures a "pre-trained" backbone by span-corruption denoising.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Backbone, ModelConfig, ModelError};
use crate::autodiff::{Optimizer, OptimizerConfig};
use crate::codec::vocab::{sentinel_id, EOS, SENTINEL_COUNT};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of tokens hidden per sequence.
    pub noise_density: f64,
    pub mean_span: f64,
    pub optimizer: OptimizerConfig,
    /// Linear warm-up length; afterwards the rate decays linearly to a
    /// tenth of `learning_rate` at the last step.
    #[serde(default)]
    pub warmup_steps: usize,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 16,
            learning_rate: 2e-3,
            noise_density: 0.15,
            mean_span: 3.0,
            optimizer: OptimizerConfig::default(),
            warmup_steps: 0,
        }
    }
}

pub struct PretrainOutcome<T> {
    pub backbone: Backbone<T>,
    /// Mean per-token loss of the first step.
    pub initial_loss: f64,
    /// Mean per-token loss over the last tenth of the steps.
    pub final_loss: f64,
    pub step_losses: Vec<f64>,
    /// Set when the loss did not at least halve.
    pub warning: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corrupted {
    pub input: Vec<usize>,
    /// Sentinel-led spans followed by the end token.
    pub target: Vec<usize>,
}

/// Splits `n` items into `k` positive parts uniformly at random.
fn segment(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    debug_assert!(k >= 1 && n >= k);
    let mut cuts: Vec<usize> = (1..n).collect();
    cuts.shuffle(rng);
    let mut cuts = cuts[..k - 1].to_vec();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(k);
    let mut prev = 0;
    for c in cuts.into_iter().chain(std::iter::once(n)) {
        out.push(c - prev);
        prev = c;
    }
    out
}

/// Replaces random spans of `tokens` with sentinels, T5 style: about
/// `noise_density` of the tokens are hidden in spans of mean length
/// `mean_span`, placed anywhere in the sequence; the target lists each
/// sentinel followed by its span.
pub fn corrupt_spans(tokens: &[usize], noise_density: f64, mean_span: f64, rng: &mut impl Rng) -> Corrupted {
    let n = tokens.len();
    if n <= 1 {
        let mut target = vec![sentinel_id(1)];
        target.extend_from_slice(tokens);
        target.push(EOS);
        return Corrupted { input: vec![sentinel_id(1)], target };
    }
    let noise = ((n as f64 * noise_density).round() as usize).clamp(1, n - 1);
    let spans = ((noise as f64 / mean_span).round() as usize).clamp(1, SENTINEL_COUNT.min(noise).min(n - noise));
    let noise_lens = segment(noise, spans, rng);
    // spans + 1 kept runs; the outer two may be empty.
    let mut keep_lens = segment(n - noise + 2, spans + 1, rng);
    keep_lens[0] -= 1;
    keep_lens[spans] -= 1;

    let mut input = Vec::with_capacity(n);
    let mut target = Vec::with_capacity(noise + spans + 1);
    let mut pos = 0;
    for (s, (&keep, &hide)) in keep_lens.iter().zip(&noise_lens).enumerate() {
        input.extend_from_slice(&tokens[pos..pos + keep]);
        pos += keep;
        let sent = sentinel_id(s + 1);
        input.push(sent);
        target.push(sent);
        target.extend_from_slice(&tokens[pos..pos + hide]);
        pos += hide;
    }
    input.extend_from_slice(&tokens[pos..]);
    target.push(EOS);
    Corrupted { input, target }
}

/// Masks the value of every `<description> : <value> .` fact that follows
/// the separator, one sentinel per value. Sequences without such facts fall
/// back to random spans.
pub fn corrupt_fact_values(tokens: &[usize], colon: usize, period: usize, sep: usize) -> Option<Corrupted> {
    let start = tokens.iter().position(|&t| t == sep)? + 1;
    let mut input = tokens[..start].to_vec();
    let mut target = Vec::new();
    let mut i = start;
    let mut spans = 0;
    while i < tokens.len() {
        input.push(tokens[i]);
        if tokens[i] == colon && spans < SENTINEL_COUNT {
            let end = tokens[i + 1..].iter().position(|&t| t == period).map(|p| i + 1 + p)?;
            if end == i + 1 {
                return None;
            }
            spans += 1;
            input.push(sentinel_id(spans));
            target.push(sentinel_id(spans));
            target.extend_from_slice(&tokens[i + 1..end]);
            i = end;
            continue;
        }
        i += 1;
    }
    if spans == 0 {
        return None;
    }
    target.push(EOS);
    Some(Corrupted { input, target })
}

/// How each pre-training sequence is turned into an input/target pair.
pub trait Corruptor {
    fn corrupt(&mut self, tokens: &[usize], options: &PretrainOptions, rng: &mut ChaCha8Rng) -> Corrupted;
}

/// Random spans only.
pub struct RandomSpans;

impl Corruptor for RandomSpans {
    fn corrupt(&mut self, tokens: &[usize], options: &PretrainOptions, rng: &mut ChaCha8Rng) -> Corrupted {
        corrupt_spans(tokens, options.noise_density, options.mean_span, rng)
    }
}

/// Fact values with probability `rate` where the sequence has facts,
/// random spans otherwise.
pub struct SalientSpans {
    pub colon: usize,
    pub period: usize,
    pub sep: usize,
    pub rate: f64,
}

impl Corruptor for SalientSpans {
    fn corrupt(&mut self, tokens: &[usize], options: &PretrainOptions, rng: &mut ChaCha8Rng) -> Corrupted {
        if rng.gen_bool(self.rate) {
            if let Some(c) = corrupt_fact_values(tokens, self.colon, self.period, self.sep) {
                return c;
            }
        }
        corrupt_spans(tokens, options.noise_density, options.mean_span, rng)
    }
}

pub fn pretrain_backbone<T: Scalar>(
    corpus: &[Vec<usize>],
    config: ModelConfig,
    seed: u64,
    options: &PretrainOptions,
) -> Result<PretrainOutcome<T>, ModelError> {
    pretrain_backbone_with(corpus, config, seed, options, &mut RandomSpans)
}

pub fn pretrain_backbone_with<T: Scalar>(
    corpus: &[Vec<usize>],
    config: ModelConfig,
    seed: u64,
    options: &PretrainOptions,
    corruptor: &mut dyn Corruptor,
) -> Result<PretrainOutcome<T>, ModelError> {
    if corpus.is_empty() {
        return Err(ModelError::Empty("pre-training corpus"));
    }
    config.validate()?;
    for (i, seq) in corpus.iter().enumerate() {
        if seq.is_empty() {
            return Err(ModelError::Empty("corpus sequence"));
        }
        if seq.len() > config.max_seq_len {
            return Err(ModelError::SequenceTooLong { what: "corpus sequence", len: seq.len(), max: config.max_seq_len });
        }
        if let Some(&bad) = seq.iter().find(|&&t| t >= config.vocab_size) {
            let _ = i;
            return Err(ModelError::UnknownToken(bad));
        }
    }
    if options.batch_size == 0 {
        return Err(ModelError::Config("batch_size must be positive".into()));
    }
    let mut backbone = Backbone::<T>::init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    let mut opt = Optimizer::new(options.optimizer.clone());
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut step_losses = Vec::with_capacity(options.steps);

    for step in 0..options.steps {
        let mut batch_loss = 0.0;
        for _ in 0..options.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let seq = &corpus[order[cursor]];
            cursor += 1;
            let ex = corruptor.corrupt(seq, options, &mut rng);
            let weight = T::one() / T::from_usize(ex.target.len() * options.batch_size).unwrap();
            let loss = backbone.accumulate_grad(&ex.input, &ex.target, weight)?;
            batch_loss += loss / (ex.target.len() * options.batch_size) as f64;
        }
        if !batch_loss.is_finite() {
            return Err(ModelError::Diverged(format!("pre-training loss {batch_loss} at step {step}")));
        }
        step_losses.push(batch_loss);
        let mut groups: Vec<&mut _> = backbone.groups_mut().iter_mut().collect();
        opt.apply_update(&mut groups, T::lit(scheduled_rate(options, step)))?;
    }
    backbone.freeze();

    let initial_loss = step_losses.first().copied().unwrap_or(f64::NAN);
    let tail = (step_losses.len() / 10).max(1).min(step_losses.len());
    let final_loss = if step_losses.is_empty() {
        f64::NAN
    } else {
        step_losses[step_losses.len() - tail..].iter().sum::<f64>() / tail as f64
    };
    let warning = (!(final_loss <= 0.5 * initial_loss)).then(|| {
        format!("pre-training loss only went from {initial_loss:.4} to {final_loss:.4} (less than a 50% reduction)")
    });
    Ok(PretrainOutcome { backbone, initial_loss, final_loss, step_losses, warning })
}

pub fn scheduled_rate(options: &PretrainOptions, step: usize) -> f64 {
    let w = options.warmup_steps;
    if step < w {
        return options.learning_rate * (step + 1) as f64 / w as f64;
    }
    let rest = options.steps.saturating_sub(w).max(1);
    let done = (step - w) as f64 / rest as f64;
    options.learning_rate * (1.0 - 0.9 * done)
}

/// Fraction of sequences whose single randomly masked token is recovered
/// exactly by greedy decoding.
pub fn reconstruction_accuracy<T: Scalar>(backbone: &Backbone<T>, sequences: &[Vec<usize>], seed: u64) -> Result<f64, ModelError> {
    if sequences.is_empty() {
        return Err(ModelError::Empty("held-out sequences"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0;
    for seq in sequences {
        let pos = rng.gen_range(0..seq.len());
        let mut input = seq.clone();
        input[pos] = sentinel_id(1);
        let out = backbone.generate(None, &input, 2)?;
        if out == [sentinel_id(1), seq[pos]] {
            hits += 1;
        }
    }
    Ok(hits as f64 / sequences.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::vocab::{sentinel_index, FIRST_WORD};

    fn restore(c: &Corrupted) -> Vec<usize> {
        let mut spans: Vec<Vec<usize>> = Vec::new();
        for &t in &c.target[..c.target.len() - 1] {
            if sentinel_index(t).is_some() {
                spans.push(Vec::new());
            } else {
                spans.last_mut().unwrap().push(t);
            }
        }
        let mut out = Vec::new();
        for &t in &c.input {
            match sentinel_index(t) {
                Some(i) => out.extend_from_slice(&spans[i - 1]),
                None => out.push(t),
            }
        }
        out
    }

    #[test]
    fn corruption_is_invertible() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in 1..60 {
            let toks: Vec<usize> = (0..n).map(|i| FIRST_WORD + i).collect();
            let c = corrupt_spans(&toks, 0.15, 3.0, &mut rng);
            assert_eq!(restore(&c), toks, "n={n}");
            assert_eq!(*c.target.last().unwrap(), EOS);
        }
    }

    #[test]
    fn fact_values_are_masked() {
        let (colon, period, sep) = (30, 31, 4);
        let toks = [40, 41, sep, 50, colon, 60, 61, period, 51, colon, 62, period];
        let c = corrupt_fact_values(&toks, colon, period, sep).unwrap();
        assert_eq!(c.input, vec![40, 41, sep, 50, colon, sentinel_id(1), period, 51, colon, sentinel_id(2), period]);
        assert_eq!(c.target, vec![sentinel_id(1), 60, 61, sentinel_id(2), 62, EOS]);
        assert!(corrupt_fact_values(&[40, 41], colon, period, sep).is_none());
    }

    #[test]
    fn empty_corpus_rejected() {
        let cfg = ModelConfig { vocab_size: 30, d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, max_seq_len: 24, prompt_length: 2 };
        let res = pretrain_backbone::<f64>(&[], cfg.clone(), 0, &PretrainOptions::default());
        assert!(matches!(res, Err(ModelError::Empty(_))));
        let res = pretrain_backbone::<f64>(&[vec![FIRST_WORD; 30]], cfg, 0, &PretrainOptions::default());
        assert!(matches!(res, Err(ModelError::SequenceTooLong { .. })));
    }

    #[test]
    fn memorizes_a_singleton() {
        let cfg = ModelConfig { vocab_size: 30, d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, max_seq_len: 24, prompt_length: 2 };
        let seq: Vec<usize> = (0..4).map(|i| FIRST_WORD + i).collect();
        let opts = PretrainOptions { steps: 200, batch_size: 4, learning_rate: 3e-3, ..Default::default() };
        let out = pretrain_backbone::<f64>(&[seq], cfg, 1, &opts).unwrap();
        assert!(out.final_loss < out.initial_loss, "{} -> {}", out.initial_loss, out.final_loss);
        assert!(out.backbone.is_frozen());
    }
}
