use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cpt_core::model::{reconstruction_accuracy, BackboneCheckpoint};
use cpt_core::runner::{
    load_stream, prepare_backbone, run_experiment, summarize, ExperimentConfig, Init, MemoryBudget, Method, RunError,
    StreamSource, BACKBONE_FILE, RUNS_DIR,
};
use cpt_core::stream::{export_corpus, pretraining_corpus, StreamError};

#[derive(Parser)]
#[command(name = "cpt", version, about = "Continual prompt tuning for dialog state tracking at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train the backbone (or load the existing one) and report its quality.
    Pretrain(Common),
    /// Write the configured task stream as a schema corpus file.
    GenerateData {
        #[command(flatten)]
        common: Common,
        /// Corpus file to write.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the generator seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every configured seed and print the summary table.
    Run(RunArgs),
    /// Print the summary table of a finished output directory.
    Summarize {
        dir: PathBuf,
        #[arg(long)]
        csv: bool,
    },
    /// Copy per-run matrices and metrics plus the summary into one directory.
    Export {
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// JSON (`.json`) or TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "CPT_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    /// Backbone checkpoint to load instead of pre-training.
    #[arg(long)]
    backbone: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    #[arg(long)]
    label: Option<String>,
    /// Comma-separated root seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, env = "CPT_THREADS")]
    threads: Option<usize>,
    #[arg(long, value_parser = parse_init)]
    init: Option<Init>,
    #[arg(long)]
    qf: Option<bool>,
    #[arg(long)]
    mr: Option<bool>,
    #[arg(long)]
    msr: Option<bool>,
    /// Stored dialogs per task.
    #[arg(long, conflicts_with = "memory_total")]
    memory: Option<usize>,
    /// Total stored dialogs, split by training-set size.
    #[arg(long)]
    memory_total: Option<usize>,
    #[arg(long)]
    full_matrix: bool,
    #[arg(long)]
    last_tasks: Option<usize>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
        format!("unknown method `{s}`, expected one of {}", names.join(", "))
    })
}

fn parse_init(s: &str) -> Result<Init, String> {
    match s {
        "random" => Ok(Init::Random),
        "cl" => Ok(Init::Cl),
        "select" => Ok(Init::Select),
        _ => Err(format!("unknown init `{s}`, expected random, cl or select")),
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, RunError> {
    let mut c = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = &common.output_dir {
        c.output_dir = d.clone();
    }
    if let Some(b) = &common.backbone {
        c.pretrain.checkpoint = Some(b.clone());
    }
    Ok(c)
}

fn pretrain(common: &Common) -> Result<(), RunError> {
    let config = load_config(common)?;
    config.validate()?;
    let stream = load_stream(&config.stream)?;
    let existed = config.pretrain.checkpoint.is_some() || config.output_dir.join(BACKBONE_FILE).exists();
    let model = prepare_backbone(&config, &stream)?;
    let gen = match &config.stream {
        StreamSource::Generate(g) => g.clone(),
        StreamSource::Ingest { .. } => Default::default(),
    };
    let held: Vec<Vec<usize>> = pretraining_corpus(&gen, 200, config.pretrain.fact_share, config.pretrain.corpus_seed ^ 0xfeed)?
        .iter()
        .map(|s| model.vocab.encode(s))
        .filter(|s| !s.is_empty() && s.len() <= model.backbone.config().max_seq_len)
        .collect();
    let acc = reconstruction_accuracy(&model.backbone, &held, 1)?;
    println!(
        "{} backbone: {} parameters, vocabulary {}, held-out single-token reconstruction {:.3}",
        if existed { "loaded" } else { "pre-trained" },
        model.backbone.num_params(),
        model.vocab.len(),
        acc
    );
    println!("checkpoint: {}", config.pretrain.checkpoint.clone().unwrap_or(config.output_dir.join(BACKBONE_FILE)).display());
    Ok(())
}

fn generate(common: &Common, out: &Path, seed: Option<u64>) -> Result<(), RunError> {
    let mut config = load_config(common)?;
    match (&mut config.stream, seed) {
        (StreamSource::Generate(g), Some(s)) => g.seed = s,
        (StreamSource::Ingest { .. }, Some(_)) => {
            return Err(RunError::Config("--seed applies to generated streams only".into()));
        }
        _ => {}
    }
    let stream = load_stream(&config.stream)?;
    export_corpus(&stream, out)?;
    let dialogs: usize = stream.services.iter().map(|s| s.dialogs.len()).sum();
    println!("wrote {} services, {dialogs} dialogs to {}", stream.len(), out.display());
    Ok(())
}

fn run(a: &RunArgs) -> Result<(), RunError> {
    let mut c = load_config(&a.common)?;
    if let Some(m) = a.method {
        c.method = m;
    }
    if a.label.is_some() {
        c.label = a.label.clone();
    }
    if let Some(s) = &a.seeds {
        c.seeds = s.clone();
    }
    if let Some(t) = a.threads {
        c.threads = t;
    }
    c.flags.init = a.init.or(c.flags.init);
    c.flags.qf = a.qf.or(c.flags.qf);
    c.flags.mr = a.mr.or(c.flags.mr);
    c.flags.msr = a.msr.or(c.flags.msr);
    if let Some(n) = a.memory {
        c.memory = MemoryBudget::Fixed(n);
    }
    if let Some(n) = a.memory_total {
        c.memory = MemoryBudget::Proportional(n);
    }
    c.full_matrix |= a.full_matrix;
    if a.last_tasks.is_some() {
        c.last_tasks = a.last_tasks;
    }
    let (outcomes, summary) = run_experiment(&c)?;
    for o in &outcomes {
        let resumed = if o.resumed_from > 0 { format!(" (resumed after task {})", o.resumed_from) } else { String::new() };
        println!("{}: Avg. JGA {:.4}{resumed}", o.name, o.report.avg_jga);
    }
    print!("{}", summary.to_text());
    Ok(())
}

fn export(dir: &Path, out: &Path) -> Result<(), RunError> {
    let summary = summarize(dir)?;
    std::fs::create_dir_all(out).map_err(|source| RunError::Io { path: out.to_path_buf(), source })?;
    let copy = |from: PathBuf, to: PathBuf| std::fs::copy(&from, &to).map(|_| ()).map_err(|source| RunError::Io { path: from, source });
    let runs = dir.join(RUNS_DIR);
    let mut n = 0;
    for entry in std::fs::read_dir(&runs).map_err(|source| RunError::Io { path: runs.clone(), source })? {
        let run = entry.map_err(|source| RunError::Io { path: runs.clone(), source })?.path();
        let name = run.file_name().unwrap_or_default().to_string_lossy().to_string();
        if run.join("metrics.json").is_file() {
            copy(run.join("matrix.csv"), out.join(format!("{name}_matrix.csv")))?;
            copy(run.join("metrics.json"), out.join(format!("{name}_metrics.json")))?;
            n += 1;
        }
    }
    std::fs::write(out.join("summary.csv"), summary.to_csv()).map_err(|source| RunError::Io { path: out.join("summary.csv"), source })?;
    if dir.join(BACKBONE_FILE).is_file() {
        let ck = BackboneCheckpoint::load(&dir.join(BACKBONE_FILE))?;
        std::fs::write(out.join("vocab.txt"), ck.vocab.join("\n") + "\n")
            .map_err(|source| RunError::Io { path: out.join("vocab.txt"), source })?;
    }
    println!("exported {n} runs to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain(c) => pretrain(c),
        Command::GenerateData { common, out, seed } => generate(common, out, *seed),
        Command::Run(a) => run(a),
        Command::Summarize { dir, csv } => summarize(dir).map(|s| print!("{}", if *csv { s.to_csv() } else { s.to_text() })),
        Command::Export { dir, out } => export(dir, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                RunError::Config(_) | RunError::Toml { .. } | RunError::Stream(StreamError::Config(_)) => 2,
                RunError::Invariant { .. } => 3,
                _ => 1,
            })
        }
    }
}
