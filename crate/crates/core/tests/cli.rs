//! The `wintent` binary: outputs, determinism and exit codes.

use std::path::{Path, PathBuf};
use std::process::Command;

use wintent::cli::{CHECKPOINT_FILE, INTENTIONS_FILE, INTENTIONS_FORMAT, PARAM_COUNT_FILE, REPORT_FILE};
use wintent::config::{ModelConfig, RunConfig};
use wintent::corpus::Corpus;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wintent"))
}

fn tiny_config(samples: usize) -> RunConfig {
    let mut cfg = RunConfig { seed: 3, model: ModelConfig::tiny(8, 1, 2), ..RunConfig::default() };
    cfg.corpus.seed = 3;
    cfg.corpus.samples = samples;
    cfg.train.epochs_stage1 = 2;
    cfg.train.epochs_stage2 = 2;
    cfg.train.epochs_phase2 = 2;
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn run(cmd: &mut Command) -> std::process::Output {
    let out = cmd.output().expect("binary runs");
    assert!(out.status.success(), "{:?} failed: {}", cmd, String::from_utf8_lossy(&out.stderr));
    out
}

fn pipeline(root: &Path, config: &Path) {
    let p = |s: &str| root.join(s);
    let ck = |s: &str| root.join(s).join(CHECKPOINT_FILE);
    run(bin().args(["gen-corpus", "--config"]).arg(config).arg("--out").arg(p("corpus")));
    run(bin().args(["train", "--phase", "1.1", "--config"]).arg(config).arg("--corpus").arg(p("corpus")).arg("--out").arg(p("s11")));
    run(bin().args(["train", "--phase", "1.2", "--checkpoint"]).arg(ck("s11")).arg("--corpus").arg(p("corpus")).arg("--out").arg(p("s12")));
    run(bin().args(["train", "--phase", "2", "--checkpoint"]).arg(ck("s12")).arg("--corpus").arg(p("corpus")).arg("--out").arg(p("p2")));
    run(bin().args(["infer", "--checkpoint"]).arg(ck("p2")).arg("--corpus").arg(p("corpus")).arg("--out").arg(p("infer")));
    run(bin().args(["validate", "--checkpoint"]).arg(ck("p2")).arg("--corpus").arg(p("corpus")).arg("--out").arg(p("report")));
}

fn files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(dir).unwrap().flatten() {
            let path = e.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn full_pipeline_is_byte_identical_across_runs() {
    let cfg_dir = tempfile::tempdir().unwrap();
    let config = write_config(cfg_dir.path(), &tiny_config(3));
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path(), &config);
    pipeline(b.path(), &config);
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert!(fa.iter().any(|(n, _)| n.ends_with(INTENTIONS_FILE)));
    assert!(fa.iter().any(|(n, _)| n.ends_with(REPORT_FILE)));
    assert_eq!(fa.len(), fb.len());
    for ((na, da), (nb, db)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        assert!(da == db, "{na} differs between runs");
    }
}

#[test]
fn hundred_sample_corpus_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_config(100));
    for out in ["a", "b"] {
        run(bin().args(["gen-corpus", "--config"]).arg(&config).arg("--out").arg(dir.path().join(out)));
    }
    let (a, b) = (files(&dir.path().join("a")), files(&dir.path().join("b")));
    assert_eq!(a, b);
    let corpus = Corpus::load(&dir.path().join("a")).unwrap();
    assert_eq!(corpus.samples.len(), 100);
}

#[test]
fn seed_flag_changes_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_config(4));
    run(bin().args(["gen-corpus", "--config"]).arg(&config).arg("--out").arg(dir.path().join("a")));
    run(bin().args(["gen-corpus", "--seed", "99", "--config"]).arg(&config).arg("--out").arg(dir.path().join("b")));
    let a = Corpus::load(&dir.path().join("a")).unwrap();
    let b = Corpus::load(&dir.path().join("b")).unwrap();
    assert_ne!(a.digest().unwrap(), b.digest().unwrap());
}

#[test]
fn zero_sample_corpus_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_config(0));
    run(bin().args(["gen-corpus", "--config"]).arg(&config).arg("--out").arg(dir.path().join("c")));
    let corpus = Corpus::load(&dir.path().join("c")).unwrap();
    assert!(corpus.samples.is_empty() && corpus.artefacts.is_empty());
}

#[test]
fn infer_respects_a_one_step_limit() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(2);
    let config = write_config(dir.path(), &cfg);
    pipeline(dir.path(), &config);
    cfg.stopping.t_max = 1;
    let limited = dir.path().join("limited.json");
    std::fs::write(&limited, serde_json::to_string(&cfg).unwrap()).unwrap();
    run(bin()
        .args(["infer", "--config"])
        .arg(&limited)
        .arg("--checkpoint")
        .arg(dir.path().join("p2").join(CHECKPOINT_FILE))
        .arg("--corpus")
        .arg(dir.path().join("corpus"))
        .arg("--out")
        .arg(dir.path().join("one")));
    let (_, records): (_, Vec<wintent::cli::InferRecord>) =
        wintent::corpus::read_jsonl_as(&dir.path().join("one").join(INTENTIONS_FILE), INTENTIONS_FORMAT, "intentions")
            .unwrap();
    assert_eq!(records.len(), 2);
    for r in records {
        assert_eq!(r.intentions.len(), 1);
        assert_eq!(r.intentions.stop_reason, wintent::intention::StopReason::HardLimit);
        assert_eq!(r.tables.len(), 1);
    }
}

#[test]
fn param_count_writes_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin().args(["param-count", "--out"]).arg(dir.path()));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("301989888") || stdout.contains("301,989,888"), "{stdout}");
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join(PARAM_COUNT_FILE)).unwrap()).unwrap();
    assert_eq!(json["report"]["rows"][0]["count"], 301_989_888u64);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"seed": 1, "unknown_key": true}"#).unwrap();
    let out = bin().args(["gen-corpus", "--config"]).arg(&bad).arg("--out").arg(dir.path().join("x")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let missing = dir.path().join("nowhere");
    let out = bin()
        .args(["train", "--phase", "1.2", "--checkpoint"])
        .arg(missing.join(CHECKPOINT_FILE))
        .arg("--corpus")
        .arg(&missing)
        .arg("--out")
        .arg(dir.path().join("y"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    let out = bin().args(["train", "--phase", "9"]).output().unwrap();
    assert!(!out.status.success());
}
