//! End-to-end checks of the binary: golden help texts, exit codes, and
//! byte-level determinism of file outputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_repgen"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn repgen")
}

fn stdout(output: &Output) -> String {
    String::from_utf8(output.stdout.clone()).expect("utf-8 stdout")
}

fn golden_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

const SUBCOMMANDS: [&str; 11] = [
    "build-corpus",
    "index",
    "retrieve",
    "purify",
    "label",
    "reward",
    "synth-data",
    "train",
    "eval",
    "ablate",
    "sweep-alpha",
];

#[test]
fn help_texts_match_golden_files() {
    let mut cases = vec![(
        golden_path("help.txt"),
        run(&["--help"]),
    )];
    for sub in SUBCOMMANDS {
        cases.push((
            golden_path(&format!("help_{sub}.txt")),
            run(&[sub, "--help"]),
        ));
    }
    for (path, output) in cases {
        assert!(output.status.success(), "--help failed for {}", path.display());
        let want = std::fs::read_to_string(&path)
            .unwrap_or_else(|e| panic!("read {}: {e}", path.display()));
        let got = stdout(&output);
        assert_eq!(
            got,
            want,
            "help text drifted from {}; regenerate the golden file if the change is intended",
            path.display()
        );
    }
}

#[test]
fn every_flag_documents_its_default() {
    // Defaulted flags advertise their default values in the help text.
    let help = stdout(&run(&["retrieve", "--help"]));
    for needle in ["[default: 10]", "[default: 0]"] {
        assert!(help.contains(needle), "missing {needle} in:\n{help}");
    }
    let help = stdout(&run(&["reward", "--help"]));
    assert!(help.contains("[default: 0.4]"), "{help}");
    let help = stdout(&run(&["sweep-alpha", "--help"]));
    assert!(help.contains("[default: 0 0.2 0.4 0.6 0.8 1]"), "{help}");
}

#[test]
fn exit_codes_follow_the_contract() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&["label", "--help"]).status.code(), Some(0));
    // Usage errors: unknown subcommand, missing required flag, conflict.
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["index"]).status.code(), Some(1));
    assert_eq!(run(&["label"]).status.code(), Some(1));
    assert_eq!(
        run(&["label", "--text", "x", "--input", "y"]).status.code(),
        Some(1)
    );
    assert_eq!(run(&["eval", "--candidates", "only.txt"]).status.code(), Some(1));
    // Runtime errors: well-formed invocation that fails while running.
    let missing = run(&[
        "build-corpus",
        "--input",
        "/nonexistent/input.txt",
        "--output",
        "/nonexistent/out.jsonl",
    ]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error: "));
    let bad_n = run(&["synth-data", "--n", "0"]);
    assert_eq!(bad_n.status.code(), Some(2));
}

#[test]
fn version_prints_name_and_number() {
    let out = stdout(&run(&["--version"]));
    assert_eq!(out.trim(), "repgen 0.1.0");
}

#[test]
fn synth_data_is_byte_deterministic_per_seed() {
    let a = run(&["synth-data", "--n", "12", "--seed", "5"]);
    let b = run(&["synth-data", "--n", "12", "--seed", "5"]);
    let c = run(&["synth-data", "--n", "12", "--seed", "6"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
    assert_eq!(stdout(&a).lines().count(), 12);
}

#[test]
fn corpus_index_retrieve_purify_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let docs = dir.path().join("docs.txt");
    std::fs::write(
        &docs,
        "cardiomegaly is noted. the lungs are clear.\n\
         there is a small left pleural effusion. no pneumothorax.\n",
    )
    .unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    let index = dir.path().join("index.jsonl");
    let out = run(&[
        "build-corpus",
        "--input",
        docs.to_str().unwrap(),
        "--output",
        corpus.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&[
        "index",
        "--corpus",
        corpus.to_str().unwrap(),
        "--output",
        index.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let retrieve = |k: &str| {
        run(&[
            "retrieve",
            "--corpus",
            corpus.to_str().unwrap(),
            "--index",
            index.to_str().unwrap(),
            "--report",
            "small left pleural effusion",
            "--k",
            k,
        ])
    };
    let out = retrieve("3");
    assert!(out.status.success());
    assert_eq!(out.stdout, retrieve("3").stdout, "retrieve is deterministic");
    let lines: Vec<serde_json::Value> = stdout(&out)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(
        lines[0]["text"],
        "there is a small left pleural effusion",
        "best match is the planted fact"
    );

    let cands = dir.path().join("cands.jsonl");
    std::fs::write(&cands, stdout(&out)).unwrap();
    let out = run(&[
        "purify",
        "--candidates",
        cands.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--indication",
        "evaluate for effusion",
        "--m",
        "2",
    ]);
    assert!(out.status.success());
    let kept: Vec<serde_json::Value> = stdout(&out)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(kept.len(), 2);
    let cand_ids: Vec<u64> = lines.iter().map(|l| l["fact_id"].as_u64().unwrap()).collect();
    for fact in &kept {
        assert!(cand_ids.contains(&fact["fact_id"].as_u64().unwrap()));
    }
}

#[test]
fn label_output_covers_all_categories() {
    let out = run(&["label", "--text", "no pneumothorax. there is cardiomegaly."]);
    assert!(out.status.success());
    let row: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    let labels = row["labels"].as_object().unwrap();
    assert_eq!(labels.len(), 14);
    assert_eq!(labels["Cardiomegaly"], "positive");
    assert_eq!(labels["Pneumothorax"], "negative");
    assert_eq!(labels["Edema"], "unmentioned");
}

#[test]
fn reward_blend_endpoints_via_flags() {
    let args = |alpha: &str| {
        vec![
            "reward".to_string(),
            "--generated".into(),
            "there is cardiomegaly.".into(),
            "--reference".into(),
            "cardiomegaly is present.".into(),
            "--alpha".into(),
            alpha.into(),
        ]
    };
    let at = |alpha: &str| -> serde_json::Value {
        let owned = args(alpha);
        let refs: Vec<&str> = owned.iter().map(String::as_str).collect();
        let out = run(&refs);
        assert!(out.status.success());
        serde_json::from_str(stdout(&out).trim()).unwrap()
    };
    let zero = at("0.0");
    let one = at("1.0");
    // alpha 0 keeps only the disease term, so every token gets r_dis.
    let r_dis = zero["r_dis"].as_f64().unwrap();
    for tok in zero["per_token_reward"].as_array().unwrap() {
        assert!((tok.as_f64().unwrap() - r_dis).abs() <= 1e-12);
    }
    // alpha 1 keeps only the sentence term.
    let score = one["sentence_scores"][0]["score"].as_f64().unwrap();
    for tok in one["per_token_reward"].as_array().unwrap() {
        assert!((tok.as_f64().unwrap() - score).abs() <= 1e-12);
    }
    let bad = run(&["reward", "--generated", "a.", "--reference", "b.", "--alpha", "1.5"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn eval_identity_corpus_scores_one_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let reports = dir.path().join("reports.txt");
    std::fs::write(
        &reports,
        "there is cardiomegaly. no effusion.\nthe lungs are clear without pneumothorax.\n",
    )
    .unwrap();
    let out = run(&[
        "eval",
        "--candidates",
        reports.to_str().unwrap(),
        "--references",
        reports.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    for key in ["bleu_1", "bleu_2", "bleu_3", "bleu_4", "rouge_l", "ce_precision", "ce_recall", "ce_f1"] {
        assert_eq!(report[key].as_f64().unwrap(), 1.0, "{key}");
    }
    assert!(report["per_example"].as_array().unwrap().is_empty());
}
