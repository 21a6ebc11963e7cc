mod common;

use std::fs;
use std::path::Path;

use common::fixture;
use cpt_core::metrics::{avg_jga, bwt, fwt, MetricsReport};
use cpt_core::runner::{
    baseline_finetune, finetune_task, run_one, run_until, summarize, ExperimentConfig, FinetuneSchedule,
    MemoryBudget, Method, RunError, RunManifest, RUNS_DIR,
};
use cpt_core::stream::MemoryBuffer;
use cpt_core::transfer::Schedule;

fn quick(method: Method, dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        method,
        schedule: Schedule { phase_a_epochs: 2, phase_b_epochs: 1, ..Default::default() },
        backward: cpt_core::transfer::BackwardOptions { epochs: 1, ..Default::default() },
        finetune: FinetuneSchedule { epochs: 2, ..Default::default() },
        memory: MemoryBudget::Fixed(4),
        output_dir: dir.to_path_buf(),
        ..fixture().config.clone()
    }
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Log lines with wall-clock fields removed.
fn timeless(path: &Path) -> Vec<serde_json::Value> {
    let text = String::from_utf8(read(path)).unwrap();
    text.lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .collect()
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let f = fixture();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ca = quick(Method::CptMemBack, a.path());
    let cb = quick(Method::CptMemBack, b.path());
    let whole = run_one(&ca, 0, &f.stream, &f.model).unwrap();
    assert_eq!(whole.resumed_from, 0);

    assert!(run_until(&cb, 0, &f.stream, &f.model, 2).unwrap().is_none());
    let run_dir = b.path().join(RUNS_DIR).join(cb.run_name(0));
    assert!(!run_dir.join("metrics.json").exists());
    // Files staged for a commit that never happened are discarded.
    let stale = run_dir.join("pending").join("3").join("bank");
    fs::create_dir_all(&stale).unwrap();
    fs::write(stale.join("01_x.json"), "garbage").unwrap();
    let resumed = run_one(&cb, 0, &f.stream, &f.model).unwrap();
    assert_eq!(resumed.resumed_from, 2);
    assert!(!run_dir.join("pending").exists());

    assert_eq!(resumed.report, whole.report);
    for file in ["metrics.json", "matrix.csv", "gate_log.jsonl", "accept_log.jsonl"] {
        assert_eq!(read(&whole.dir.join(file)), read(&resumed.dir.join(file)), "{file}");
    }
    assert_eq!(timeless(&whole.dir.join("train_log.jsonl")), timeless(&resumed.dir.join("train_log.jsonl")));
    let manifest = |d: &Path| -> RunManifest { serde_json::from_slice(&read(&d.join("manifest.json"))).unwrap() };
    let (mw, mr) = (manifest(&whole.dir), manifest(&resumed.dir));
    assert_eq!((&mw.matrix, &mw.stream, mw.completed), (&mr.matrix, &mr.stream, mr.completed));
    for entry in fs::read_dir(whole.dir.join("bank")).unwrap() {
        let p = entry.unwrap().path();
        assert_eq!(read(&p), read(&resumed.dir.join("bank").join(p.file_name().unwrap())));
    }
}

#[test]
fn resume_refuses_changed_settings() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let c = quick(Method::Cpt, d.path());
    run_until(&c, 0, &f.stream, &f.model, 1).unwrap();
    let changed = ExperimentConfig { schedule: Schedule { phase_a_epochs: 3, ..c.schedule.clone() }, ..c };
    assert!(matches!(run_one(&changed, 0, &f.stream, &f.model), Err(RunError::Resume { .. })));
}

#[test]
fn prompt_tuning_leaves_transfer_blank() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let out = run_one(&quick(Method::PromptTuning, d.path()), 0, &f.stream, &f.model).unwrap();
    assert_eq!((out.report.fwt, out.report.bwt), (None, None));
    assert_eq!(out.report.tunable_params_per_task, 4 * 16);
    assert_eq!(out.report.stored_params_total, 4 * 4 * 16);
}

#[test]
fn cpt_without_backward_has_exactly_zero_bwt() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let before = f.model.backbone.digest();
    let out = run_one(&quick(Method::Cpt, d.path()), 0, &f.stream, &f.model).unwrap();
    assert_eq!(out.report.bwt, Some(0.0));
    let m = out.report.matrix().unwrap();
    for i in 0..3 {
        assert_eq!(m.get(3, i).unwrap().to_bits(), m.get(i, i).unwrap().to_bits());
    }
    assert!(out.report.fwt.is_some());
    assert_eq!(f.model.backbone.digest(), before);
    let manifest: RunManifest = serde_json::from_slice(&read(&out.dir.join("manifest.json"))).unwrap();
    assert_eq!(manifest.completed, 4);
}

#[test]
fn persisted_reports_recompute_the_summary() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let mut outs = Vec::new();
    for seed in [1, 2] {
        let c = ExperimentConfig { seeds: vec![seed], ..quick(Method::CptMem, d.path()) };
        outs.push(run_one(&c, 0, &f.stream, &f.model).unwrap());
    }
    for o in &outs {
        let r: MetricsReport = serde_json::from_slice(&read(&o.dir.join("metrics.json"))).unwrap();
        let m = r.matrix().unwrap();
        assert_eq!(avg_jga(&m).unwrap(), r.avg_jga);
        assert_eq!(fwt(&m).unwrap(), r.fwt);
        assert_eq!(bwt(&m).unwrap(), r.bwt);
        let manifest: RunManifest = serde_json::from_slice(&read(&o.dir.join("manifest.json"))).unwrap();
        assert_eq!(manifest.matrix, m);
    }
    let s = summarize(d.path()).unwrap();
    assert_eq!(s.rows.len(), 1);
    assert_eq!(s.rows[0].runs, 2);
    let mean = (outs[0].report.avg_jga + outs[1].report.avg_jga) / 2.0;
    assert!((s.rows[0].avg_jga.mean - mean).abs() < 1e-15);
    assert!(s.rows[0].avg_jga.std.is_some());
    assert!(d.path().join("summary.csv").exists());
    assert!(matches!(summarize(tempfile::tempdir().unwrap().path()), Err(RunError::NoRuns(_))));
}

#[test]
fn finetuning_learns_and_single_task_bwt_is_undefined() {
    let f = fixture();
    let mut model = f.model.clone();
    model.backbone.unfreeze();
    let sched = FinetuneSchedule { epochs: 3, patience: 10, ..Default::default() };
    let logs = finetune_task(&mut model, &f.stream, 0, &MemoryBuffer::default(), false, &sched, 1).unwrap();
    assert!(logs.last().unwrap().train_loss < logs[0].train_loss);
    assert!(finetune_task(&mut f.model.clone(), &f.stream, 0, &MemoryBuffer::default(), false, &sched, 1).is_err());

    let single = f.stream.reordered(&[2]);
    let m = baseline_finetune(f.model.clone(), &single, 4, false, &sched, 1).unwrap();
    assert_eq!(m.tasks(), 1);
    assert!(bwt(&m).unwrap().is_none());
    assert!(avg_jga(&m).is_ok());
}

#[test]
fn unlimited_replay_trains_on_every_seen_task() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let c = ExperimentConfig { memory: MemoryBudget::All, ..quick(Method::Replay, d.path()) };
    let out = run_one(&c, 0, &f.stream, &f.model).unwrap();
    let manifest: RunManifest = serde_json::from_slice(&read(&out.dir.join("manifest.json"))).unwrap();
    let text = String::from_utf8(read(&out.dir.join("train_log.jsonl"))).unwrap();
    let logs: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    for (j, id) in manifest.stream.task_order.iter().enumerate() {
        let seen: usize = manifest.stream.splits[..j].iter().map(|s| s.train.len()).sum();
        for l in logs.iter().filter(|l| l["task"] == id.as_str()) {
            assert_eq!(l["memory_examples"].as_u64().unwrap() as usize, seen, "task {id}");
        }
        if j > 0 {
            let stored = &manifest.stream.memory[&manifest.stream.task_order[j - 1]];
            assert_eq!(stored, &manifest.stream.splits[j - 1].train);
        }
    }
}
