use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use sac_core::needle::{self, NeedleConfig};

fn sac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sac"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn sac_stdin(args: &[&str], input: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_sac"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("binary runs");
    child
        .stdin
        .take()
        .unwrap()
        .write_all(input.as_bytes())
        .unwrap();
    child.wait_with_output().unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not one JSON document ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn corpus(dir: &Path, mangle_codes: bool) -> PathBuf {
    let docs = needle::generate(
        &NeedleConfig {
            docs: 100,
            sentences: 4,
            ..NeedleConfig::default()
        },
        32_768,
    );
    let mut text = String::new();
    for mut record in needle::to_records(&docs, &needle::label_codes(8)) {
        if mangle_codes {
            record.ipc_codes = vec!["Z12A".into(), "??".into()];
        }
        text.push_str(&serde_json::to_string(&record).unwrap());
        text.push('\n');
    }
    let path = dir.join("corpus.jsonl");
    std::fs::write(&path, text).unwrap();
    path
}

fn train(dir: &Path, corpus: &Path, name: &str, extra: &[&str]) -> Output {
    let out = dir.join(name);
    let mut args = vec![
        "train",
        corpus.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--h",
        "16",
        "--max-epochs",
        "3",
        "--patience",
        "3",
        "--lr",
        "0.01",
    ];
    args.extend_from_slice(extra);
    sac(&args)
}

#[test]
fn train_then_evaluate_and_predict() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path(), false);
    let log = dir.path().join("log.jsonl");
    let out = train(
        dir.path(),
        &corpus,
        "m.satn",
        &["--log", log.to_str().unwrap()],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = json(&out);
    assert_eq!(summary["labels"].as_array().unwrap().len(), 8);
    assert_eq!(summary["meta"]["epochs_run"], 3);
    let log_lines: Vec<serde_json::Value> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(log_lines.len(), 3);
    assert_eq!(log_lines[2]["epoch"], 3);

    let model = dir.path().join("m.satn");
    let out = sac(&[
        "evaluate",
        model.to_str().unwrap(),
        corpus.to_str().unwrap(),
        "--split",
        "test",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let report = json(&out);
    assert_eq!(report["per_class"].as_array().unwrap().len(), 8);
    assert!(report["micro"]["f1"].is_number());
    assert!(report["macro"]["f1"].is_number());

    let out = sac(&[
        "predict",
        model.to_str().unwrap(),
        corpus.to_str().unwrap(),
        "--dump-attention",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let predictions = json(&out);
    let first = &predictions[0];
    assert_eq!(first["id"], "needle-000");
    assert_eq!(first["scores"].as_array().unwrap().len(), 8);
    assert!(first["predicted"].is_array());
    let attention = first["attention"].as_array().unwrap();
    assert_eq!(attention.len(), 8);
    assert_eq!(attention[0].as_array().unwrap().len(), 4);
}

#[test]
fn identical_runs_write_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path(), false);
    let a = train(dir.path(), &corpus, "a.satn", &["--seed", "5"]);
    let b = train(dir.path(), &corpus, "b.satn", &["--seed", "5"]);
    assert_eq!(a.status.code(), Some(0));
    let bytes_a = std::fs::read(dir.path().join("a.satn")).unwrap();
    let bytes_b = std::fs::read(dir.path().join("b.satn")).unwrap();
    assert!(bytes_a == bytes_b);
    assert_eq!(json(&a)["meta"], json(&b)["meta"]);

    let split_a = sac(&["split", corpus.to_str().unwrap(), "--seed", "5"]);
    let split_b = sac(&["split", corpus.to_str().unwrap(), "--seed", "5"]);
    assert_eq!(split_a.stdout, split_b.stdout);
}

#[test]
fn corpus_subcommands_emit_json() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path(), false);
    let stats = json(&sac(&["stats", corpus.to_str().unwrap()]));
    assert_eq!(stats["dropped"], 0);
    assert_eq!(stats["skipped"], 0);
    assert!(stats["G01A"].as_u64().unwrap() > 0);

    let vocab = json(&sac(&[
        "build-vocab",
        corpus.to_str().unwrap(),
        "--top-c",
        "3",
    ]));
    assert_eq!(vocab["codes"].as_array().unwrap().len(), 3);

    let split = json(&sac(&["split", corpus.to_str().unwrap()]));
    let total: usize = ["train", "validation", "test"]
        .iter()
        .map(|k| split[k].as_array().unwrap().len())
        .sum();
    assert_eq!(total, 100);

    let out_path = dir.path().join("vocab.json");
    let out = sac(&[
        "build-vocab",
        corpus.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(out.stdout.is_empty());
    let written: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_path).unwrap()).unwrap();
    assert_eq!(written["codes"].as_array().unwrap().len(), 8);
}

#[test]
fn unparseable_labels_exit_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path(), true);
    let out = train(dir.path(), &corpus, "m.satn", &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("IPC"));
}

#[test]
fn diverging_training_exits_with_numeric_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path(), false);
    let out = sac(&[
        "train",
        corpus.to_str().unwrap(),
        "--out",
        dir.path().join("m.satn").to_str().unwrap(),
        "--h",
        "8",
        "--lr",
        "1e30",
        "--max-epochs",
        "5",
        "--patience",
        "5",
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch"));
}

#[test]
fn usage_errors_exit_with_one() {
    let out = sac(&["train", "x.jsonl", "--out", "m.satn", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(sac(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(
        sac(&["gradcheck", "--encoder", "lstm"]).status.code(),
        Some(1)
    );

    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.conf");
    std::fs::write(&config, "# widths\nh = 16\nmax_epochs = abc\n").unwrap();
    let out = sac(&[
        "train",
        "x.jsonl",
        "--out",
        "m.satn",
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    std::fs::write(&config, "depth = 2\n").unwrap();
    let out = sac(&["split", "x.jsonl", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
}

#[test]
fn config_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path(), false);
    let config = dir.path().join("run.conf");
    std::fs::write(&config, "h = 8\nseed = 11\nmax_epochs = 2\npatience = 2\n").unwrap();
    let out = sac(&[
        "train",
        corpus.to_str().unwrap(),
        "--out",
        dir.path().join("m.satn").to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "12",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let summary = json(&out);
    assert_eq!(summary["config"]["h"], 8);
    assert_eq!(summary["config"]["seed"], 12);
    assert_eq!(summary["meta"]["epochs_run"], 2);
}

#[test]
fn gradcheck_reports_small_error() {
    let out = sac(&["gradcheck", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0));
    let report = json(&out);
    assert!(report["max_rel_error"].as_f64().unwrap() < 1e-4);
    assert!(report["worst_param"].as_str().unwrap().contains('['));

    let out = sac(&[
        "gradcheck",
        "--seed",
        "7",
        "--encoder",
        "mini-transformer",
        "--eps",
        "0.1",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(json(&out)["max_rel_error"].as_f64().unwrap().is_finite());
}

#[test]
fn segment_matches_golden_file() {
    let golden: Vec<serde_json::Value> =
        serde_json::from_str(include_str!("../../core/tests/data/segmenter_golden.json")).unwrap();
    for case in golden {
        let out = sac_stdin(&["segment"], case["text"].as_str().unwrap());
        assert_eq!(out.status.code(), Some(0));
        assert_eq!(json(&out), case["sentences"]);
    }
    assert_eq!(sac_stdin(&["segment"], "   \n").status.code(), Some(2));
}
