//! Experiment orchestration: configuration, backbone preparation, the
//! per-seed task loop with persistence, the fine-tuning baselines and the
//! cross-run summary.

mod finetune;
mod run;
mod setup;
mod summary;

pub use finetune::{baseline_finetune, finetune_task, FinetuneSchedule};
pub use run::{run_experiment, run_one, run_until, RunManifest, RunOutcome, RUNS_DIR};
pub use setup::{build_vocab, load_stream, prepare_backbone, BACKBONE_FILE};
pub use summary::{summarize, MethodRow, RunSummary, Stat};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::metrics::MetricsError;
use crate::model::{ModelConfig, ModelError, PretrainOptions};
use crate::stream::{name_hash, GeneratorConfig, StreamError};
use crate::transfer::{BackwardOptions, Schedule, TransferError};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invariant violated in {run}: {msg}")]
    Invariant { run: String, msg: String },
    #[error("cannot resume {run}: {msg}")]
    Resume { run: String, msg: String },
    #[error("no completed runs under {0}")]
    NoRuns(PathBuf),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Toml { path: PathBuf, source: toml::de::Error },
}

impl RunError {
    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| Self::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn json(path: &Path) -> impl FnOnce(serde_json::Error) -> Self + '_ {
        move |source| Self::Json { path: path.to_path_buf(), source }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// One independent prompt per task.
    PromptTuning,
    /// Previous-prompt initialization and query fusion.
    Cpt,
    /// `cpt` with memory replay.
    CptMem,
    /// `cpt_mem` with gated backward transfer.
    CptMemBack,
    /// One unfrozen backbone trained task after task.
    Finetune,
    /// `finetune` with the memory of earlier tasks mixed in.
    Replay,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::PromptTuning, Method::Cpt, Method::CptMem, Method::CptMemBack, Method::Finetune, Method::Replay];

    pub fn name(self) -> &'static str {
        match self {
            Method::PromptTuning => "prompt_tuning",
            Method::Cpt => "cpt",
            Method::CptMem => "cpt_mem",
            Method::CptMemBack => "cpt_mem_back",
            Method::Finetune => "finetune",
            Method::Replay => "replay",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn tunes_backbone(self) -> bool {
        matches!(self, Method::Finetune | Method::Replay)
    }

    /// Whether a prompt carries over from one task to the next, making the
    /// zero-shot entries meaningful.
    pub fn sequential(self) -> bool {
        self != Method::PromptTuning
    }

    pub fn preset(self) -> Flags {
        let base = Flags { msr: true, init: Init::Cl, qf: true, mr: false, backward: false };
        match self {
            Method::PromptTuning => Flags { init: Init::Random, qf: false, ..base },
            Method::Cpt => base,
            Method::CptMem => Flags { mr: true, ..base },
            Method::CptMemBack => Flags { mr: true, backward: true, ..base },
            Method::Finetune => Flags { msr: false, init: Init::Random, qf: false, mr: false, backward: false },
            Method::Replay => Flags { msr: false, init: Init::Random, qf: false, mr: true, backward: false },
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Random,
    Cl,
    Select,
}

/// The resolved ablation axes of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    /// Sentinel-aligned queries; off means `slot = value` targets.
    pub msr: bool,
    pub init: Init,
    pub qf: bool,
    pub mr: bool,
    pub backward: bool,
}

/// Per-axis overrides on top of a method preset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlagOverrides {
    pub msr: Option<bool>,
    pub init: Option<Init>,
    pub qf: Option<bool>,
    pub mr: Option<bool>,
}

impl FlagOverrides {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum StreamSource {
    Generate(GeneratorConfig),
    Ingest { path: PathBuf, split_seed: u64 },
}

impl Default for StreamSource {
    fn default() -> Self {
        StreamSource::Generate(GeneratorConfig::default())
    }
}

/// Model shape without the vocabulary size, which follows from the data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub prompt_length: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = ModelConfig::desk(0);
        Self {
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            max_seq_len: c.max_seq_len,
            prompt_length: c.prompt_length,
        }
    }
}

impl ModelShape {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            prompt_length: self.prompt_length,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSpec {
    /// Sentences drawn from the generator's templates.
    pub corpus_sentences: usize,
    pub corpus_seed: u64,
    /// Share of corpus sentences followed by their slot facts.
    pub fact_share: f64,
    pub init_seed: u64,
    /// Probability that a sentence with facts has all fact values masked
    /// instead of random spans.
    pub fact_mask_rate: f64,
    pub options: PretrainOptions,
    /// Existing checkpoint to load instead of pre-training.
    pub checkpoint: Option<PathBuf>,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        Self {
            corpus_sentences: 40_000,
            corpus_seed: 99,
            fact_share: 0.8,
            init_seed: 7,
            fact_mask_rate: 0.9,
            options: PretrainOptions { steps: 3000, learning_rate: 3e-3, warmup_steps: 100, ..Default::default() },
            checkpoint: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryBudget {
    /// Dialogs stored per task.
    Fixed(usize),
    /// Total dialogs, split across tasks by training-set size.
    Proportional(usize),
    /// Every training dialog.
    All,
}

impl MemoryBudget {
    pub fn is_zero(&self) -> bool {
        matches!(self, MemoryBudget::Fixed(0) | MemoryBudget::Proportional(0))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderSpec {
    /// A permutation derived from each run's seed.
    #[default]
    Seeded,
    /// The stream's own order for every run.
    Identity,
    /// Task ids per run, cycled over the seeds.
    Explicit(Vec<Vec<String>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Name of the method row in summaries; defaults to the method name.
    pub label: Option<String>,
    pub flags: FlagOverrides,
    pub stream: StreamSource,
    pub model: ModelShape,
    pub pretrain: PretrainSpec,
    pub schedule: Schedule,
    pub backward: BackwardOptions,
    pub finetune: FinetuneSchedule,
    pub memory: MemoryBudget,
    pub seeds: Vec<u64>,
    pub orders: OrderSpec,
    /// Evaluates every earlier task after each task, not just the entries
    /// the metrics need.
    pub full_matrix: bool,
    /// Trains only on the last `n` tasks of each order.
    pub last_tasks: Option<usize>,
    pub output_dir: PathBuf,
    /// Runs executed concurrently.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Cpt,
            label: None,
            flags: FlagOverrides::default(),
            stream: StreamSource::default(),
            model: ModelShape::default(),
            pretrain: PretrainSpec::default(),
            schedule: Schedule::default(),
            backward: BackwardOptions::default(),
            finetune: FinetuneSchedule::default(),
            memory: MemoryBudget::Fixed(50),
            seeds: vec![1, 2, 3, 4, 5],
            orders: OrderSpec::Seeded,
            full_matrix: false,
            last_tasks: None,
            output_dir: PathBuf::from("cpt-out"),
            threads: 1,
        }
    }
}

impl ExperimentConfig {
    /// Reads a `.json` file, or TOML otherwise.
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(RunError::io(path))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(RunError::json(path))
        } else {
            toml::from_str(&text).map_err(|source| RunError::Toml { path: path.to_path_buf(), source })
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.method.name().to_string())
    }

    pub fn flags(&self) -> Flags {
        let mut f = self.method.preset();
        let o = &self.flags;
        f.msr = o.msr.unwrap_or(f.msr);
        f.init = o.init.unwrap_or(f.init);
        f.qf = o.qf.unwrap_or(f.qf);
        f.mr = o.mr.unwrap_or(f.mr);
        f
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        let f = self.flags();
        if self.method.tunes_backbone() && !self.flags.is_empty() {
            return bad(format!("flag overrides do not apply to `{}`", self.method));
        }
        if (f.mr || f.backward) && self.memory.is_zero() {
            return bad("memory replay and backward transfer need a memory budget above zero".into());
        }
        if f.qf && !f.msr {
            return bad("query fusion needs the sentinel format (msr)".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, &s) in self.seeds.iter().enumerate() {
            if !seen.insert((s, self.order_slot(i))) {
                return bad(format!("seed {s} repeated with the same order"));
            }
        }
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        if self.last_tasks == Some(0) {
            return bad("last_tasks must be positive".into());
        }
        if let OrderSpec::Explicit(o) = &self.orders {
            if o.is_empty() {
                return bad("explicit orders list is empty".into());
            }
        }
        if !(self.pretrain.fact_mask_rate >= 0.0 && self.pretrain.fact_mask_rate <= 1.0) {
            return bad("fact_mask_rate must lie in [0, 1]".into());
        }
        self.model.with_vocab(1).validate()?;
        Ok(())
    }

    fn order_slot(&self, i: usize) -> usize {
        match &self.orders {
            OrderSpec::Explicit(o) if !o.is_empty() => i % o.len(),
            _ => 0,
        }
    }

    /// Directory name of the `i`-th run.
    pub fn run_name(&self, i: usize) -> String {
        let base = format!("{}_s{}", self.label(), self.seeds[i]);
        match &self.orders {
            OrderSpec::Explicit(o) if o.len() > 1 => format!("{base}_o{}", self.order_slot(i)),
            _ => base,
        }
    }
}

/// Independent stream of seeds for each purpose and index.
pub fn derive_seed(root: u64, purpose: &str, index: u64) -> u64 {
    let mut z = root ^ name_hash(purpose).rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_differ_by_one_axis() {
        let (c, m, b) = (Method::Cpt.preset(), Method::CptMem.preset(), Method::CptMemBack.preset());
        assert_eq!(Flags { mr: true, ..c }, m);
        assert_eq!(Flags { backward: true, ..m }, b);
        assert_eq!(c, Flags { msr: true, init: Init::Cl, qf: true, mr: false, backward: false });
        assert!(!Method::PromptTuning.sequential());
    }

    #[test]
    fn validation_rules() {
        let mut c = ExperimentConfig { method: Method::CptMem, memory: MemoryBudget::Fixed(0), ..Default::default() };
        assert!(matches!(c.validate(), Err(RunError::Config(_))));
        c.memory = MemoryBudget::Fixed(5);
        c.validate().unwrap();
        c.flags.msr = Some(false);
        assert!(c.validate().is_err());
        c.flags.qf = Some(false);
        c.validate().unwrap();
        let f = ExperimentConfig { method: Method::Finetune, flags: FlagOverrides { qf: Some(true), ..Default::default() }, ..Default::default() };
        assert!(f.validate().is_err());
        let dup = ExperimentConfig { seeds: vec![3, 3], ..Default::default() };
        assert!(dup.validate().is_err());
    }

    #[test]
    fn toml_and_json_configs() {
        let t: ExperimentConfig = toml::from_str(
            r#"
method = "cpt_mem"
seeds = [4, 9]
memory = { proportional = 30 }
[stream]
source = "generate"
n_services = 5
[schedule]
phase_a_epochs = 2
[flags]
init = "select"
"#,
        )
        .unwrap();
        assert_eq!(t.method, Method::CptMem);
        assert_eq!(t.memory, MemoryBudget::Proportional(30));
        assert_eq!(t.flags().init, Init::Select);
        assert_eq!(t.schedule.phase_b_epochs, Schedule::default().phase_b_epochs);
        match &t.stream {
            StreamSource::Generate(g) => assert_eq!(g.n_services, 5),
            other => panic!("{other:?}"),
        }
        let j = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&j).unwrap(), t);
        assert!(toml::from_str::<ExperimentConfig>("metod = \"cpt\"").is_err());
    }

    #[test]
    fn derived_seeds_separate_purposes() {
        let a = derive_seed(1, "train", 0);
        assert_ne!(a, derive_seed(1, "train", 1));
        assert_ne!(a, derive_seed(1, "init", 0));
        assert_ne!(a, derive_seed(2, "train", 0));
        assert_eq!(a, derive_seed(1, "train", 0));
    }
}
