use std::path::Path;
use std::process::Command;

use cpt_core::runner::ExperimentConfig;

fn cpt(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cpt")).args(args).output().unwrap()
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in std::fs::read_dir(&dir).unwrap() {
        let p = e.unwrap().path();
        let c = ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        c.validate().unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        n += 1;
    }
    assert!(n >= 2);
}

#[test]
fn bad_configuration_exits_with_two() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("bad.toml");
    std::fs::write(&p, "seeds = []\n").unwrap();
    let out = cpt(&["run", "--config", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    std::fs::write(&p, "no_such_key = 1\n").unwrap();
    let out = cpt(&["run", "--config", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn unknown_method_is_rejected() {
    let out = cpt(&["run", "--method", "sgd"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("expected one of"));
}

#[test]
fn summarize_without_runs_fails() {
    let d = tempfile::tempdir().unwrap();
    let out = cpt(&["summarize", d.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no completed runs"));
}

#[test]
fn generated_data_ingests_back() {
    let d = tempfile::tempdir().unwrap();
    let corpus = d.path().join("stream.json");
    let cfg = d.path().join("c.toml");
    std::fs::write(&cfg, "[stream]\nsource = \"generate\"\nn_services = 3\nmin_samples = 40\nmax_samples = 40\n").unwrap();
    let out = cpt(&["generate-data", "--config", cfg.to_str().unwrap(), "--out", corpus.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("3 services, 120 dialogs"));
    let (stream, report) = cpt_core::stream::ingest_schema_corpus(&corpus, 0).unwrap();
    assert_eq!(stream.len(), 3);
    assert_eq!(report.skipped_multi_service, 0);
}
