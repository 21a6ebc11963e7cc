use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::finetune::FinetuneLearner;
use super::setup::{load_stream, prepare_backbone};
use super::summary::{summarize, RunSummary};
use super::{derive_seed, ExperimentConfig, Flags, Init, MemoryBudget, Method, OrderSpec, RunError};
use crate::metrics::{AccuracyMatrix, MetricsReport};
use crate::model::{count_tunable_params, init_prompt_random, BackboneCheckpoint, PromptCheckpoint};
use crate::stream::{proportional_budget, sample_memory, MemoryBuffer, StreamManifest, TaskStream};
use crate::transfer::{
    accept_update, backward_transfer_task, cl_init, memory_examples, select_init, train_task, AcceptRecord,
    BackwardOptions, EpochLog, GateRecord, PromptBank, PromptModel, Schedule, TrainFlags,
};

/// Subdirectory holding one directory per run.
pub const RUNS_DIR: &str = "runs";
const MANIFEST: &str = "manifest.json";
const METRICS: &str = "metrics.json";
const TRAIN_LOG: &str = "train_log.jsonl";
const GATE_LOG: &str = "gate_log.jsonl";
const ACCEPT_LOG: &str = "accept_log.jsonl";
const BANK_DIR: &str = "bank";
const MODEL_FILE: &str = "model.json";
/// Files of the next commit, moved into place once the manifest records it.
const PENDING_DIR: &str = "pending";

/// Everything one task produced besides the accuracies.
#[derive(Default)]
pub(crate) struct TaskRecords {
    pub epochs: Vec<EpochLog>,
    pub gates: Vec<GateRecord>,
    pub accepts: Vec<AcceptRecord>,
}

pub(crate) trait Learner {
    /// Accuracy on task `j` before it is trained.
    fn zero_shot(&self, j: usize) -> Result<f64, RunError>;
    fn train(&mut self, j: usize) -> Result<TaskRecords, RunError>;
    /// Current accuracy on the test split of task `i`.
    fn eval(&self, i: usize) -> Result<f64, RunError>;
}

/// The task loop over positions `start..end`. After each task the diagonal
/// is filled, the zero-shot entry before it when `fwt`, and earlier tasks'
/// entries on the last task or always when `full`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn drive<L: Learner>(
    learner: &mut L,
    tasks: usize,
    fwt: bool,
    full: bool,
    start: usize,
    end: usize,
    m: &mut AccuracyMatrix,
    mut commit: impl FnMut(usize, &L, &AccuracyMatrix, TaskRecords) -> Result<(), RunError>,
) -> Result<(), RunError> {
    for j in start..end.min(tasks) {
        if j > 0 && fwt {
            m.set(j - 1, j, learner.zero_shot(j)?)?;
        }
        let records = learner.train(j)?;
        m.set(j, j, learner.eval(j)?)?;
        if full || j + 1 == tasks {
            for i in 0..j {
                m.set(j, i, learner.eval(i)?)?;
            }
        }
        commit(j, learner, m, records)?;
    }
    Ok(())
}

struct PromptLearner<'a> {
    model: &'a PromptModel<f64>,
    stream: &'a TaskStream,
    flags: Flags,
    schedule: Schedule,
    backward: BackwardOptions,
    memory: MemoryBuffer,
    capacities: Vec<usize>,
    bank: PromptBank<f64>,
    seed: u64,
}

impl PromptLearner<'_> {
    fn name_format(&self) -> bool {
        !self.flags.msr
    }
}

impl Learner for PromptLearner<'_> {
    fn zero_shot(&self, j: usize) -> Result<f64, RunError> {
        let prev = self.bank.last().ok_or_else(|| RunError::Config("zero-shot evaluation without a banked prompt".into()))?;
        let svc = &self.stream.services[j];
        Ok(self.model.task_jga(Some(prev), &self.stream.test(j), svc, self.name_format())?)
    }

    fn train(&mut self, j: usize) -> Result<TaskRecords, RunError> {
        let (model, stream) = (self.model, self.stream);
        let svc = &stream.services[j];
        let nf = self.name_format();
        let init_seed = derive_seed(self.seed, "init", j as u64);
        let prompt = match self.flags.init {
            Init::Random => init_prompt_random(&model.backbone, &svc.id, init_seed),
            Init::Cl => cl_init(&self.bank, model, &svc.id, init_seed),
            Init::Select => {
                let val = model.encode_task(&stream.val(j), svc, nf)?;
                if val.is_empty() {
                    init_prompt_random(&model.backbone, &svc.id, init_seed)
                } else {
                    select_init(&self.bank, model, &val, &svc.id, init_seed)?
                }
            }
        };
        let flags = TrainFlags { query_fusion: self.flags.qf, memory_replay: self.flags.mr, name_format: nf };
        let before = self.bank.digest();
        let (trained, epochs) =
            train_task(model, prompt, stream, j, &self.memory, flags, &self.schedule, derive_seed(self.seed, "train", j as u64))?;
        if self.bank.digest() != before {
            return Err(RunError::Invariant { run: svc.id.clone(), msg: "forward training changed the prompt bank".into() });
        }
        self.bank.insert(trained)?;
        if self.flags.mr || self.flags.backward {
            let picked = sample_memory(stream, j, self.capacities[j], derive_seed(self.seed, "memory", 0));
            self.memory.insert(&svc.id, picked);
        }

        let mut records = TaskRecords { epochs, ..Default::default() };
        if self.flags.backward && j > 0 {
            let current = model.encode_task(&stream.train(j), svc, nf)?;
            for i in 0..j {
                let prev = &stream.services[i];
                let (mem, dialogs) = memory_examples(model, stream, i, self.memory.get(&prev.id), nf)?;
                let p_i = self.bank.get(&prev.id).expect("earlier task banked");
                let seed = derive_seed(self.seed, "backward", (j * 4096 + i) as u64);
                let (cand, stats) = backward_transfer_task(model, p_i, &current, &mem, &self.backward, seed)?;
                records.gates.extend(stats.records);
                records.accepts.push(accept_update(model, &mut self.bank, cand, &dialogs, prev, nf)?);
            }
        }
        Ok(records)
    }

    fn eval(&self, i: usize) -> Result<f64, RunError> {
        let svc = &self.stream.services[i];
        let p = self.bank.get(&svc.id).ok_or_else(|| RunError::Config(format!("task `{}` not banked", svc.id)))?;
        Ok(self.model.task_jga(Some(p), &self.stream.test(i), svc, self.name_format())?)
    }
}

/// Persisted progress of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub label: String,
    pub method: Method,
    pub flags: Flags,
    pub seed: u64,
    /// SHA-256 of every setting that affects the run's results.
    pub config_digest: String,
    pub stream: StreamManifest,
    pub capacities: Vec<usize>,
    /// Tasks finished, in order.
    pub completed: usize,
    pub matrix: AccuracyMatrix,
    /// Byte length of each log file at the last commit.
    pub log_lengths: BTreeMap<String, u64>,
    pub backbone_digest: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub name: String,
    pub dir: PathBuf,
    pub report: MetricsReport,
    /// Tasks already complete on disk when the run started.
    pub resumed_from: usize,
}

#[derive(Serialize)]
struct GateLine<'a> {
    task: &'a str,
    #[serde(flatten)]
    record: &'a GateRecord,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(RunError::io(&tmp))?;
    fs::rename(&tmp, path).map_err(RunError::io(path))
}

fn append_lines<S: Serialize>(path: &Path, items: impl IntoIterator<Item = S>) -> Result<u64, RunError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(RunError::io(path))?;
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, &it).map_err(RunError::json(path))?;
        buf.push(b'\n');
    }
    f.write_all(&buf).map_err(RunError::io(path))?;
    Ok(f.metadata().map_err(RunError::io(path))?.len())
}

fn task_order(config: &ExperimentConfig, i: usize, stream: &TaskStream) -> Result<Vec<usize>, RunError> {
    let t = stream.len();
    let mut order: Vec<usize> = match &config.orders {
        OrderSpec::Identity => (0..t).collect(),
        OrderSpec::Seeded => {
            let mut o: Vec<usize> = (0..t).collect();
            o.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seeds[i], "order", 0)));
            o
        }
        OrderSpec::Explicit(orders) => {
            let ids = &orders[i % orders.len()];
            let mut seen = std::collections::BTreeSet::new();
            let mut o = Vec::with_capacity(ids.len());
            for id in ids {
                let p = stream.position(id)?;
                if !seen.insert(p) {
                    return Err(RunError::Config(format!("task `{id}` listed twice in an order")));
                }
                o.push(p);
            }
            o
        }
    };
    if let Some(n) = config.last_tasks {
        if n > order.len() {
            return Err(RunError::Config(format!("last_tasks {n} exceeds the {} tasks of the order", order.len())));
        }
        order.drain(..order.len() - n);
    }
    if order.is_empty() {
        return Err(RunError::Config("empty task order".into()));
    }
    Ok(order)
}

fn capacities(budget: MemoryBudget, stream: &TaskStream) -> Result<Vec<usize>, RunError> {
    let sizes: Vec<usize> = stream.splits.iter().map(|s| s.train.len()).collect();
    match budget {
        MemoryBudget::Fixed(n) => Ok(vec![n; sizes.len()]),
        MemoryBudget::All => Ok(sizes),
        MemoryBudget::Proportional(total) => {
            if total < sizes.len() {
                return Err(RunError::Config(format!("memory total {total} is below the {} tasks", sizes.len())));
            }
            Ok(proportional_budget(&sizes, total))
        }
    }
}

fn config_digest(config: &ExperimentConfig, seed: u64, order: &[String]) -> String {
    let v = serde_json::json!({
        "method": config.method,
        "flags": config.flags(),
        "stream": config.stream,
        "model": config.model,
        "pretrain": config.pretrain,
        "schedule": config.schedule,
        "backward": config.backward,
        "finetune": config.finetune,
        "memory": config.memory,
        "full_matrix": config.full_matrix,
        "seed": seed,
        "order": order,
    });
    hex(&Sha256::digest(v.to_string().as_bytes()))
}

/// Moves the files staged for commit `completed` into place and drops any
/// other staged files.
fn promote_pending(dir: &Path, completed: usize) -> Result<(), RunError> {
    let root = dir.join(PENDING_DIR);
    let staged = root.join(completed.to_string());
    if staged.is_dir() {
        for rel in [PathBuf::from(MODEL_FILE), PathBuf::from(BANK_DIR)] {
            let from = staged.join(&rel);
            if from.is_file() {
                fs::rename(&from, dir.join(&rel)).map_err(RunError::io(&from))?;
            } else if from.is_dir() {
                for e in fs::read_dir(&from).map_err(RunError::io(&from))? {
                    let f = e.map_err(RunError::io(&from))?.path();
                    let to = dir.join(&rel).join(f.file_name().unwrap_or_default());
                    fs::rename(&f, &to).map_err(RunError::io(&f))?;
                }
            }
        }
    }
    if root.exists() {
        fs::remove_dir_all(&root).map_err(RunError::io(&root))?;
    }
    Ok(())
}

/// Executes run `i` of `config`, resuming from its directory when a
/// manifest is present.
pub fn run_one(config: &ExperimentConfig, i: usize, base: &TaskStream, model: &PromptModel<f64>) -> Result<RunOutcome, RunError> {
    Ok(run_until(config, i, base, model, usize::MAX)?.expect("no task limit"))
}

/// Like [`run_one`] but stops once `limit` tasks are complete. Returns
/// `None` when the run is left unfinished; calling again resumes it.
pub fn run_until(
    config: &ExperimentConfig,
    i: usize,
    base: &TaskStream,
    model: &PromptModel<f64>,
    limit: usize,
) -> Result<Option<RunOutcome>, RunError> {
    let name = config.run_name(i);
    let seed = config.seeds[i];
    let dir = config.output_dir.join(RUNS_DIR).join(&name);
    fs::create_dir_all(dir.join(BANK_DIR)).map_err(RunError::io(&dir))?;
    let order = task_order(config, i, base)?;
    let stream = base.reordered(&order);
    let t = stream.len();
    let ids = stream.task_ids();
    let flags = config.flags();
    let method = config.method;
    let digest = config_digest(config, seed, &ids);
    let caps = capacities(config.memory, &stream)?;
    let backbone_digest = hex(&model.backbone.digest());

    let manifest_path = dir.join(MANIFEST);
    let mut manifest = if manifest_path.exists() {
        let m: RunManifest = serde_json::from_slice(&fs::read(&manifest_path).map_err(RunError::io(&manifest_path))?)
            .map_err(RunError::json(&manifest_path))?;
        if m.config_digest != digest {
            return Err(RunError::Resume { run: name, msg: "settings differ from the persisted run".into() });
        }
        if m.backbone_digest != backbone_digest {
            return Err(RunError::Resume { run: name, msg: "backbone differs from the persisted run".into() });
        }
        m
    } else {
        RunManifest {
            name: name.clone(),
            label: config.label(),
            method,
            flags,
            seed,
            config_digest: digest,
            stream: StreamManifest {
                root_seed: seed,
                split_seed: stream.split_seed,
                task_order: ids.clone(),
                splits: stream.splits.clone(),
                memory: BTreeMap::new(),
                memory_seed: derive_seed(seed, "memory", 0),
            },
            capacities: caps.clone(),
            completed: 0,
            matrix: AccuracyMatrix::new(t),
            log_lengths: BTreeMap::new(),
            backbone_digest: backbone_digest.clone(),
        }
    };
    let resumed_from = manifest.completed;
    promote_pending(&dir, resumed_from)?;
    for log in [TRAIN_LOG, GATE_LOG, ACCEPT_LOG] {
        let path = dir.join(log);
        let keep = manifest.log_lengths.get(log).copied().unwrap_or(0);
        let f = OpenOptions::new().create(true).write(true).truncate(false).open(&path).map_err(RunError::io(&path))?;
        f.set_len(keep).map_err(RunError::io(&path))?;
    }
    let memory = MemoryBuffer { entries: manifest.stream.memory.clone() };
    let mut matrix = manifest.matrix.clone();
    let fwt = method.sequential();

    let bank_file = |k: usize, id: &str| format!("{:02}_{id}.json", k + 1);
    let stage = |j: usize| dir.join(PENDING_DIR).join((j + 1).to_string());
    let mut commit_common = |j: usize, m: &AccuracyMatrix, rec: TaskRecords, memory: &MemoryBuffer| -> Result<(), RunError> {
        let mut lens = BTreeMap::new();
        let task = &ids[j];
        lens.insert(TRAIN_LOG.to_string(), append_lines(&dir.join(TRAIN_LOG), &rec.epochs)?);
        lens.insert(
            GATE_LOG.to_string(),
            append_lines(&dir.join(GATE_LOG), rec.gates.iter().map(|r| GateLine { task, record: r }))?,
        );
        lens.insert(ACCEPT_LOG.to_string(), append_lines(&dir.join(ACCEPT_LOG), &rec.accepts)?);
        manifest.completed = j + 1;
        manifest.matrix = m.clone();
        manifest.log_lengths = lens;
        manifest.stream.memory = memory.entries.clone();
        let bytes = serde_json::to_vec_pretty(&manifest).map_err(RunError::json(&manifest_path))?;
        write_atomic(&manifest_path, &bytes)?;
        promote_pending(&dir, j + 1)
    };

    let (tunable, stored) = if method.tunes_backbone() {
        let mut finetuned = model.clone();
        finetuned.backbone.unfreeze();
        let saved = dir.join(MODEL_FILE);
        if resumed_from > 0 {
            let ck = BackboneCheckpoint::load(&saved)?;
            finetuned.backbone = ck.to_backbone()?;
        }
        let mut learner = FinetuneLearner {
            model: finetuned,
            stream: &stream,
            memory,
            capacities: caps,
            replay: flags.mr,
            schedule: config.finetune.clone(),
            seed,
        };
        drive(&mut learner, t, fwt, config.full_matrix, resumed_from, limit, &mut matrix, |j, l, m, rec| {
            let ck = BackboneCheckpoint::from_backbone(&l.model.backbone, l.model.vocab.tokens().to_vec());
            let staged = stage(j);
            fs::create_dir_all(&staged).map_err(RunError::io(&staged))?;
            let path = staged.join(MODEL_FILE);
            fs::write(&path, serde_json::to_vec(&ck).map_err(RunError::json(&path))?).map_err(RunError::io(&path))?;
            commit_common(j, m, rec, &l.memory)
        })?;
        let n = model.backbone.num_params();
        (n, n)
    } else {
        let mut bank = PromptBank::new();
        for (k, id) in ids.iter().enumerate().take(resumed_from) {
            let path = dir.join(BANK_DIR).join(bank_file(k, id));
            bank.insert(PromptCheckpoint::load(&path)?.to_prompt()?)?;
        }
        let mut learner = PromptLearner {
            model,
            stream: &stream,
            flags,
            schedule: config.schedule.clone(),
            backward: config.backward.clone(),
            memory,
            capacities: caps,
            bank,
            seed,
        };
        drive(&mut learner, t, fwt, config.full_matrix, resumed_from, limit, &mut matrix, |j, l, m, rec| {
            let staged = stage(j).join(BANK_DIR);
            fs::create_dir_all(&staged).map_err(RunError::io(&staged))?;
            for (k, id) in ids.iter().enumerate().take(j + 1) {
                let p = l.bank.get(id).expect("banked");
                let path = staged.join(bank_file(k, id));
                fs::write(&path, serde_json::to_vec(&PromptCheckpoint::from_prompt(p)).map_err(RunError::json(&path))?)
                    .map_err(RunError::io(&path))?;
            }
            commit_common(j, m, rec, &l.memory)
        })?;
        if hex(&model.backbone.digest()) != backbone_digest {
            return Err(RunError::Invariant { run: name, msg: "backbone changed during prompt training".into() });
        }
        let per_task = count_tunable_params(model.backbone.config());
        (per_task, per_task * t)
    };

    if manifest.completed < t {
        return Ok(None);
    }
    check_invariants(&name, &dir, &matrix, flags, method)?;
    let mut report = MetricsReport::from_matrix(&config.label(), seed, ids, &matrix, fwt)?;
    report.tunable_params_per_task = tunable;
    report.stored_params_total = stored;
    report.backbone_params = model.backbone.num_params();
    let path = dir.join(METRICS);
    write_atomic(&path, &serde_json::to_vec_pretty(&report).map_err(RunError::json(&path))?)?;
    let csv = dir.join("matrix.csv");
    fs::write(&csv, matrix.to_csv()).map_err(RunError::io(&csv))?;
    Ok(Some(RunOutcome { name, dir, report, resumed_from }))
}

fn read_lines<T: for<'d> Deserialize<'d>>(path: &Path) -> Result<Vec<T>, RunError> {
    let text = fs::read_to_string(path).map_err(RunError::io(path))?;
    text.lines().map(|l| serde_json::from_str(l).map_err(RunError::json(path))).collect()
}

fn check_invariants(name: &str, dir: &Path, m: &AccuracyMatrix, flags: Flags, method: Method) -> Result<(), RunError> {
    let fail = |msg: String| Err(RunError::Invariant { run: name.to_string(), msg });
    let t = m.tasks();
    if !method.tunes_backbone() && !flags.backward {
        for i in 0..t.saturating_sub(1) {
            let (a, b) = (m.get(t - 1, i), m.get(i, i));
            if a.map(f64::to_bits) != b.map(f64::to_bits) {
                return fail(format!("task {} accuracy moved from {b:?} to {a:?} without backward transfer", i + 1));
            }
        }
    }
    for g in read_lines::<GateRecord>(&dir.join(GATE_LOG))? {
        if g.applied && !(g.dot > 0.0) {
            return fail(format!("gate applied a step with dot {}", g.dot));
        }
    }
    for a in read_lines::<AcceptRecord>(&dir.join(ACCEPT_LOG))? {
        if a.accepted && !(a.new_loss < a.old_loss && a.new_jga >= a.old_jga) {
            return fail(format!("replacement of `{}` without improvement: {a:?}", a.prev_task));
        }
    }
    Ok(())
}

/// Runs every seed of `config`, `config.threads` at a time, then
/// summarizes the output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(Vec<RunOutcome>, RunSummary), RunError> {
    config.validate()?;
    let stream = load_stream(&config.stream)?;
    let model = prepare_backbone(config, &stream)?;
    fs::create_dir_all(config.output_dir.join(RUNS_DIR)).map_err(RunError::io(&config.output_dir))?;
    let cfg_path = config.output_dir.join(format!("config_{}.json", config.label()));
    write_atomic(&cfg_path, &serde_json::to_vec_pretty(config).map_err(RunError::json(&cfg_path))?)?;

    let n = config.seeds.len();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunOutcome, RunError>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..config.threads.min(n) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = run_one(config, i, &stream, &model);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    let outcomes = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every run index is claimed"))
        .collect::<Result<Vec<_>, _>>()?;
    let summary = summarize(&config.output_dir)?;
    Ok((outcomes, summary))
}
