mod common;

use std::fs;
use std::path::{Path, PathBuf};

use common::*;
use netml_cli::commands::*;
use netml_cli::error::{EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};
use netml_core::eval::EvalReport;
use netml_core::features::parse_record;

/// Extracts and prepares a 3-trace corpus; returns the prepared directory.
fn prepared(dir: &Path, flows_per_trace: usize) -> PathBuf {
    let (caps, manifest) = corpus(dir, flows_per_trace);
    let ex = dir.join("extract");
    let mut args = vec!["extract", "--out", s(&ex)];
    args.extend(caps.iter().map(|p| s(p)));
    assert_exit(&netml(&args), EXIT_OK);
    let prep = dir.join("prepared");
    let out = netml(&[
        "prepare",
        "--records",
        s(&ex.join(RECORDS_FILE)),
        "--manifest",
        s(&manifest),
        "--seed",
        "7",
        "--salt",
        "pepper",
        "--out",
        s(&prep),
    ]);
    assert_exit(&out, EXIT_OK);
    prep
}

fn train(prep: &Path, model: &str, out: &Path, extra: &[&str]) -> std::process::Output {
    let train = prep.join(TRAIN_FILE);
    let mut args = vec!["train", "--model", model, "--train", s(&train), "--seed", "3", "--out", s(out)];
    args.extend_from_slice(extra);
    netml(&args)
}

#[test]
fn prepare_outputs_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let prep = prepared(dir.path(), 30);
    let train_text = fs::read_to_string(prep.join(TRAIN_FILE)).unwrap();
    let std_text = fs::read_to_string(prep.join(TEST_STD_FILE)).unwrap();
    let ch_text = fs::read_to_string(prep.join(TEST_CHALLENGE_FILE)).unwrap();
    // 30 flows per stratum split 24/3/3
    assert_eq!((train_text.lines().count(), std_text.lines().count(), ch_text.lines().count()), (72, 9, 9));
    for l in train_text.lines() {
        let r = parse_record(l).unwrap();
        assert!(r.labels.is_some() && r.time_start.is_none() && r.trace.is_empty());
        assert!(r.sa.starts_with("ip_") && r.da.starts_with("ip_"), "{} {}", r.sa, r.da);
    }
    for l in std_text.lines().chain(ch_text.lines()) {
        assert!(parse_record(l).unwrap().labels.is_none());
    }
    let withheld: Vec<WithheldLine> =
        fs::read_to_string(prep.join(WITHHELD_FILE)).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(withheld.len(), 18);
    assert_eq!(withheld.iter().filter(|w| w.split == "test-std").count(), 9);

    // a second run over the same extraction is byte-identical
    let manifest = dir.path().join("manifest.json");
    let again = dir.path().join("again");
    let out = netml(&[
        "prepare",
        "-r",
        s(&dir.path().join("extract").join(RECORDS_FILE)),
        "-m",
        s(&manifest),
        "--seed",
        "7",
        "--salt",
        "pepper",
        "-o",
        s(&again),
    ]);
    assert_exit(&out, EXIT_OK);
    for f in [TRAIN_FILE, TEST_STD_FILE, TEST_CHALLENGE_FILE, WITHHELD_FILE, SPLIT_FILE, STATS_FILE] {
        assert_eq!(fs::read(prep.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn stats_table_golden() {
    let dir = tempfile::tempdir().unwrap();
    let prep = prepared(dir.path(), 30);
    let golden = "\
top      flows
Malware     30
VPN         30
nonVPN      30
total       90

mid        flows
chat          30
streaming     30
zeus          30
total         90
";
    assert_eq!(fs::read_to_string(prep.join(STATS_FILE)).unwrap(), golden);

    let out = netml(&["stats", "-r", s(&prep.join(TRAIN_FILE)), "--level", "mid"]);
    assert_exit(&out, EXIT_OK);
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        "mid        flows\nchat          24\nstreaming     24\nzeus          24\ntotal         72\n"
    );
    let table = dir.path().join("std.txt");
    let out = netml(&[
        "stats",
        "-r",
        s(&prep.join(TEST_STD_FILE)),
        "--labels",
        s(&prep.join(WITHHELD_FILE)),
        "--level",
        "top",
        "--out",
        s(&table),
    ]);
    assert_exit(&out, EXIT_OK);
    assert_eq!(fs::read_to_string(table).unwrap(), "top      flows\nMalware      3\nVPN          3\nnonVPN       3\ntotal        9\n");
}

#[test]
fn unmatched_trace_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let (caps, _) = corpus(dir.path(), 10);
    let ex = dir.path().join("extract");
    let mut args = vec!["extract", "--out", s(&ex)];
    args.extend(caps.iter().map(|p| s(p)));
    assert_exit(&netml(&args), EXIT_OK);
    let manifest = dir.path().join("partial.json");
    fs::write(&manifest, r#"{"entries": [{"pattern": "chat_*", "top": "a", "mid": "b"}]}"#).unwrap();
    let out = netml(&[
        "prepare",
        "-r",
        s(&ex.join(RECORDS_FILE)),
        "-m",
        s(&manifest),
        "--seed",
        "1",
        "--salt",
        "x",
        "-o",
        s(&dir.path().join("p")),
    ]);
    assert_exit(&out, EXIT_DATA);
    assert!(String::from_utf8_lossy(&out.stderr).contains("vpn_stream.pcap"));
}

fn validate_report(json: &str) {
    let schema: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/report.schema.json")).unwrap())
            .unwrap();
    let v = jsonschema::validator_for(&schema).unwrap();
    let doc: serde_json::Value = serde_json::from_str(json).unwrap();
    let errors: Vec<String> = v.iter_errors(&doc).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{errors:#?}");
}

#[test]
fn train_evaluate_predict_all_models() {
    let dir = tempfile::tempdir().unwrap();
    let prep = prepared(dir.path(), 30);
    let m = dir.path().join("mthl");
    assert_exit(&train(&prep, "mthl", &m, &["--epochs", "40", "--batch-size", "16"]), EXIT_OK);
    let history: serde_json::Value = serde_json::from_slice(&fs::read(m.join(HISTORY_FILE)).unwrap()).unwrap();
    assert_eq!(history["epochs"].as_array().unwrap().len(), 40);
    assert_eq!(history["heads"], serde_json::json!(["mid", "top"]));
    let mlp = dir.path().join("mlp");
    assert_exit(&train(&prep, "mlp", &mlp, &["--epochs", "40", "--batch-size", "16", "--level", "top", "--hidden", "32,16"]), EXIT_OK);
    let knn = dir.path().join("knn");
    assert_exit(&train(&prep, "knn", &knn, &["--k", "3"]), EXIT_OK);
    assert!(!knn.join(HISTORY_FILE).exists());

    let rep = dir.path().join("report");
    let out = netml(&[
        "evaluate",
        "-c",
        s(&m.join(CHECKPOINT_FILE)),
        "-c",
        s(&mlp.join(CHECKPOINT_FILE)),
        "-c",
        s(&knn.join(CHECKPOINT_FILE)),
        "--eval",
        s(&prep.join(TEST_STD_FILE)),
        "--labels",
        s(&prep.join(WITHHELD_FILE)),
        "--dataset",
        "vpn",
        "--dataset",
        "mal",
        "--dataset",
        "cic",
        "--out",
        s(&rep),
    ]);
    assert_exit(&out, EXIT_OK);
    let json = fs::read_to_string(rep.join(REPORT_JSON_FILE)).unwrap();
    validate_report(&json);
    let report: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(report.models, ["mthl", "mlp", "knn"]);
    let names: Vec<(&str, &str)> = report.scenarios.iter().map(|s| (s.scenario.as_str(), s.model.as_str())).collect();
    assert!(names.contains(&("vpn-m", "mthl")) && names.contains(&("mal-t", "mlp")) && names.contains(&("vpn-m", "knn")));
    assert!(!names.contains(&("vpn-m", "mlp")));
    assert_eq!(report.notes.len(), 1);
    assert!(report.notes[0].contains("cic"));
    for s in &report.scenarios {
        assert!(s.macro_f1 > 0.9, "{} {} {}", s.scenario, s.model, s.macro_f1);
    }
    let text = fs::read_to_string(rep.join(REPORT_TEXT_FILE)).unwrap();
    assert!(text.starts_with("scenario"), "{text}");
    assert!(text.contains("note: dataset cic"));

    // identical inputs, identical report
    let rep2 = dir.path().join("report2");
    let out = netml(&[
        "evaluate",
        "-c",
        s(&m.join(CHECKPOINT_FILE)),
        "-c",
        s(&mlp.join(CHECKPOINT_FILE)),
        "-c",
        s(&knn.join(CHECKPOINT_FILE)),
        "--eval",
        s(&prep.join(TEST_STD_FILE)),
        "--labels",
        s(&prep.join(WITHHELD_FILE)),
        "--dataset",
        "vpn",
        "--dataset",
        "mal",
        "--dataset",
        "cic",
        "--out",
        s(&rep2),
    ]);
    assert_exit(&out, EXIT_OK);
    assert_eq!(json, fs::read_to_string(rep2.join(REPORT_JSON_FILE)).unwrap());

    let pred = dir.path().join("pred.jsonl");
    let out = netml(&["predict", "-c", s(&m.join(CHECKPOINT_FILE)), "-i", s(&prep.join(TEST_CHALLENGE_FILE)), "-o", s(&pred)]);
    assert_exit(&out, EXIT_OK);
    let lines: Vec<serde_json::Value> =
        fs::read_to_string(&pred).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 9);
    for l in &lines {
        let o = l.as_object().unwrap();
        assert_eq!(o.keys().collect::<Vec<_>>(), ["id", "mid", "top"]);
    }
    let pred_knn = dir.path().join("pred_knn.jsonl");
    let out = netml(&["predict", "-c", s(&knn.join(CHECKPOINT_FILE)), "-i", s(&prep.join(TEST_CHALLENGE_FILE)), "-o", s(&pred_knn)]);
    assert_exit(&out, EXIT_OK);
    assert!(fs::read_to_string(&pred_knn).unwrap().lines().all(|l| l.contains("\"mid\"")));
}

#[test]
fn knn_k1_on_its_own_training_rows_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let prep = prepared(dir.path(), 20);
    let knn = dir.path().join("knn");
    assert_exit(&train(&prep, "knn", &knn, &["--k", "1", "--level", "top"]), EXIT_OK);
    let rep = dir.path().join("r");
    let out = netml(&["evaluate", "-c", s(&knn.join(CHECKPOINT_FILE)), "-e", s(&prep.join(TRAIN_FILE)), "-o", s(&rep)]);
    assert_exit(&out, EXIT_OK);
    let report: EvalReport = serde_json::from_slice(&fs::read(rep.join(REPORT_JSON_FILE)).unwrap()).unwrap();
    assert_eq!(report.scenarios.len(), 2);
    assert!(report.scenarios.iter().all(|s| s.macro_f1 == 1.0), "{report:?}");
}

#[test]
fn knn_checkpoint_detects_changed_training_file() {
    let dir = tempfile::tempdir().unwrap();
    let prep = prepared(dir.path(), 20);
    let knn = dir.path().join("knn");
    assert_exit(&train(&prep, "knn", &knn, &["--k", "1"]), EXIT_OK);
    let text = fs::read_to_string(prep.join(TRAIN_FILE)).unwrap();
    let fewer: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
    let other = dir.path().join("other.jsonl");
    fs::write(&other, fewer).unwrap();
    let out = netml(&[
        "predict",
        "-c",
        s(&knn.join(CHECKPOINT_FILE)),
        "-i",
        s(&prep.join(TEST_STD_FILE)),
        "-o",
        s(&dir.path().join("p.jsonl")),
        "--train-ref",
        s(&other),
    ]);
    assert_exit(&out, EXIT_DATA);
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash"));
}

#[test]
fn train_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let prep = prepared(dir.path(), 15);
    let mut bytes = Vec::new();
    for (name, seed) in [("a", "5"), ("b", "5"), ("c", "6")] {
        let out_dir = dir.path().join(name);
        let out = netml(&[
            "train",
            "--model",
            "mthl",
            "-t",
            s(&prep.join(TRAIN_FILE)),
            "--seed",
            seed,
            "--epochs",
            "3",
            "-o",
            s(&out_dir),
        ]);
        assert_exit(&out, EXIT_OK);
        bytes.push((fs::read(out_dir.join(CHECKPOINT_FILE)).unwrap(), fs::read(out_dir.join(HISTORY_FILE)).unwrap()));
    }
    assert_eq!(bytes[0], bytes[1]);
    assert_ne!(bytes[0].0, bytes[2].0);
}

#[test]
fn wrong_schema_version_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let prep = prepared(dir.path(), 10);
    let text = fs::read_to_string(prep.join(TRAIN_FILE)).unwrap();
    let bumped = text.replacen("\"schema_version\":1,", "\"schema_version\":2,", 1);
    assert_ne!(bumped, text);
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, bumped).unwrap();
    let out = netml(&["train", "--model", "mlp", "-t", s(&bad), "--seed", "1", "-o", s(&dir.path().join("m"))]);
    assert_exit(&out, EXIT_DATA);
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema version 2"));

    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"schema_version": 9}"#).unwrap();
    let out = netml(&["train", "--config", s(&cfg), "--model", "mlp", "-t", s(&prep.join(TRAIN_FILE)), "--seed", "1", "-o", s(&dir.path().join("m"))]);
    assert_exit(&out, EXIT_USAGE);
}

#[test]
fn diverging_training_exits_numeric() {
    let dir = tempfile::tempdir().unwrap();
    let prep = prepared(dir.path(), 10);
    let out = train(&prep, "mlp", &dir.path().join("m"), &["--lr", "1e300", "--epochs", "5"]);
    assert_exit(&out, EXIT_NUMERIC);
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_file_and_env_var() {
    let dir = tempfile::tempdir().unwrap();
    let prep = prepared(dir.path(), 10);
    let cfg = dir.path().join("run.json");
    let body = serde_json::json!({
        "seed": 4,
        "paths": {"train": prep.join(TRAIN_FILE), "out": dir.path().join("from_cfg")},
        "train": {"epochs": 2, "batch_size": 8},
        "mlp": {"hidden": [8]}
    });
    fs::write(&cfg, body.to_string()).unwrap();
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_netml"))
        .args(["train", "--model", "mlp"])
        .env("NETML_CONFIG", &cfg)
        .output()
        .unwrap();
    assert_exit(&out, EXIT_OK);
    let h: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("from_cfg").join(HISTORY_FILE)).unwrap()).unwrap();
    assert_eq!(h["epochs"].as_array().unwrap().len(), 2);

    // the flag wins over the file
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_netml"))
        .args(["train", "--model", "mlp", "--epochs", "1", "--out", s(&dir.path().join("flag"))])
        .env("NETML_CONFIG", &cfg)
        .output()
        .unwrap();
    assert_exit(&out, EXIT_OK);
    let h: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("flag").join(HISTORY_FILE)).unwrap()).unwrap();
    assert_eq!(h["epochs"].as_array().unwrap().len(), 1);

    fs::write(&cfg, r#"{"sede": 4}"#).unwrap();
    let out = netml(&["train", "--config", s(&cfg), "--model", "mlp"]);
    assert_exit(&out, EXIT_USAGE);
}

#[test]
fn usage_errors() {
    assert_exit(&netml(&["frobnicate"]), EXIT_USAGE);
    assert_exit(&netml(&["train", "--model", "svm"]), EXIT_USAGE);
    let dir = tempfile::tempdir().unwrap();
    // missing seed
    let out = netml(&["train", "--model", "mthl", "-t", "x.jsonl", "-o", s(dir.path())]);
    assert_exit(&out, EXIT_USAGE);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
    // missing input file
    let out = netml(&["train", "--model", "mthl", "-t", s(&dir.path().join("nope.jsonl")), "--seed", "1", "-o", s(dir.path())]);
    assert_exit(&out, EXIT_USAGE);
    assert_exit(&netml(&["--help"]), EXIT_OK);
}

#[test]
fn gradcheck_table_all_pass() {
    let out = netml(&["gradcheck"]);
    assert_exit(&out, EXIT_OK);
    let table = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 7, "{table}");
    assert!(lines[0].starts_with("layer"));
    for l in &lines[1..] {
        assert!(l.ends_with("PASS"), "{l}");
        assert!(l.contains("  5  "), "{l}");
    }
    for layer in ["conv1d", "batchnorm(train)", "dense", "softmax_xent"] {
        assert!(lines.iter().any(|l| l.starts_with(layer)), "{layer}");
    }
}
