use std::path::Path;
use std::process::{Command, Output};

fn lexiscope(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lexiscope"))
        .args(args)
        .current_dir(cwd)
        .env_remove("LEXISCOPE_OUT")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = lexiscope(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TRAIN_TOML: &str = r#"
vocab = "vocab.txt"
corpus = ["corpus.txt"]
split_prob = 0.1

[model]
d_model = 16
n_layers = 2
n_heads = 2
d_ff = 32
vocab_size = 400
max_seq = 48

[train]
steps = 5
batch_size = 2
seq_len = 24
lr = 0.01
"#;

/// Synthesizes a corpus, trains a vocabulary and a tiny model.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &["synth", "--out", "corpus.txt", "--lines", "300", "--seed", "2"],
        d,
    );
    ok(
        &[
            "tokenizer",
            "train",
            "--corpus",
            "corpus.txt",
            "--vocab-size",
            "400",
            "--out",
            "vocab.txt",
        ],
        d,
    );
    std::fs::write(d.join("train.toml"), TRAIN_TOML).unwrap();
    let out = ok(
        &["model", "train", "--config", "train.toml", "--ckpt", "model.ckpt"],
        d,
    );
    assert!(out.contains("\"steps\": 5"), "{out}");
    dir
}

#[test]
fn tokenizer_round_trip_and_perturbations() {
    let dir = workspace();
    let d = dir.path();
    let ids = ok(&["tokenizer", "encode", "--vocab", "vocab.txt", "hello world"], d);
    let ids: Vec<&str> = ids.split_whitespace().collect();
    assert!(!ids.is_empty());
    let mut args = vec!["tokenizer", "decode", "--vocab", "vocab.txt"];
    args.extend(ids);
    assert_eq!(ok(&args, d), "hello world\n");

    let split = ok(
        &[
            "tokenizer",
            "perturb",
            "--vocab",
            "vocab.txt",
            "--word",
            "banana",
            "--mode",
            "split",
            "--pieces",
            "3",
        ],
        d,
    );
    let v: serde_json::Value = serde_json::from_str(&split).unwrap();
    let pieces: Vec<String> = serde_json::from_value(v["pieces"].clone()).unwrap();
    assert_eq!(pieces.len(), 3);
    assert_eq!(pieces.concat(), "banana");

    let typo = ok(
        &[
            "tokenizer",
            "perturb",
            "--vocab",
            "vocab.txt",
            "--word",
            "banana",
            "--mode",
            "typo",
            "--seed",
            "3",
        ],
        d,
    );
    assert_ne!(
        serde_json::from_str::<serde_json::Value>(&typo).unwrap()["typo"],
        "banana"
    );

    let nonword = ok(
        &[
            "tokenizer",
            "perturb",
            "--vocab",
            "vocab.txt",
            "--word",
            "banana",
            "--mode",
            "nonword",
            "--corpus",
            "corpus.txt",
        ],
        d,
    );
    assert!(nonword.contains("\"nonword\""));

    let bad = lexiscope(
        &[
            "tokenizer",
            "perturb",
            "--vocab",
            "vocab.txt",
            "--word",
            "banana",
            "--mode",
            "shuffle",
        ],
        d,
    );
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn model_eval_and_generate() {
    let dir = workspace();
    let d = dir.path();
    let eval = ok(
        &["model", "eval", "--config", "train.toml", "--ckpt", "model.ckpt"],
        d,
    );
    let v: serde_json::Value = serde_json::from_str(&eval).unwrap();
    assert!(v["loss"].as_f64().unwrap() > 0.0);
    let text = ok(
        &[
            "model",
            "generate",
            "--ckpt",
            "model.ckpt",
            "--vocab",
            "vocab.txt",
            "--prompt",
            "the",
            "--max-new",
            "4",
        ],
        d,
    );
    assert!(text.starts_with("the"));
}

#[test]
fn experiment_report_and_overrides() {
    let dir = workspace();
    let d = dir.path();
    let exp = [
        "exp",
        "split-retrieval",
        "--ckpt",
        "model.ckpt",
        "--vocab",
        "vocab.txt",
        "--corpus",
        "corpus.txt",
        "--seed",
        "1",
        "--out",
        "run1",
    ];
    ok(&exp, d);
    let first = std::fs::read(d.join("run1/report.json")).unwrap();
    ok(&exp, d);
    assert_eq!(first, std::fs::read(d.join("run1/report.json")).unwrap());
    let summary = ok(&["report", "run1"], d);
    assert!(summary.contains("per_layer: best layer"), "{summary}");

    let out = Command::new(env!("CARGO_BIN_EXE_lexiscope"))
        .args(exp)
        .current_dir(d)
        .env("LEXISCOPE_OUT", d.join("elsewhere"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(d.join("elsewhere/manifest.json").exists());

    std::fs::write(d.join("run1/report.json"), "{}").unwrap();
    assert_eq!(lexiscope(&["report", "run1"], d).status.code(), Some(3));
}

#[test]
fn exit_codes() {
    let dir = workspace();
    let d = dir.path();
    let unknown = lexiscope(
        &[
            "exp",
            "nope",
            "--ckpt",
            "model.ckpt",
            "--vocab",
            "vocab.txt",
            "--corpus",
            "corpus.txt",
            "--out",
            "o",
        ],
        d,
    );
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("unknown experiment"));
    let missing = lexiscope(
        &[
            "exp",
            "split-retrieval",
            "--ckpt",
            "gone.ckpt",
            "--vocab",
            "vocab.txt",
            "--corpus",
            "corpus.txt",
            "--out",
            "o",
        ],
        d,
    );
    assert_eq!(missing.status.code(), Some(3));
    assert_eq!(lexiscope(&["frobnicate"], d).status.code(), Some(2));
    std::fs::write(
        d.join("bad.toml"),
        "experiment = \"split-retrieval\"\nextra = 1\n",
    )
    .unwrap();
    assert_eq!(
        lexiscope(&["run", "--config", "bad.toml"], d).status.code(),
        Some(2)
    );
}

#[test]
fn patchscope_writes_one_result_per_layer() {
    let dir = workspace();
    let d = dir.path();
    std::fs::write(d.join("words.txt"), "hello\nworld\n").unwrap();
    ok(
        &[
            "patchscope",
            "--ckpt",
            "model.ckpt",
            "--vocab",
            "vocab.txt",
            "--words",
            "words.txt",
            "--template",
            "xxxx",
            "--out",
            "results.jsonl",
        ],
        d,
    );
    let text = std::fs::read_to_string(d.join("results.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2 * 3);
    assert_eq!(rows[0]["target"], "hello");
    assert_eq!(rows[5]["layer"], 2);
}

#[test]
fn expand_and_evaluate() {
    let dir = workspace();
    let d = dir.path();
    ok(
        &[
            "expand",
            "--ckpt",
            "model.ckpt",
            "--vocab",
            "vocab.txt",
            "--train",
            "corpus.txt",
            "--test",
            "corpus.txt",
            "--min-count",
            "2",
            "--refine-steps",
            "2",
            "--out",
            "exp",
        ],
        d,
    );
    assert!(d.join("exp/expanded/entries.jsonl").exists());
    let eval = ok(
        &[
            "expand",
            "eval",
            "--dir",
            "exp/expanded",
            "--ckpt",
            "model.ckpt",
            "--vocab",
            "vocab.txt",
            "--test",
            "corpus.txt",
        ],
        d,
    );
    let v: serde_json::Value = serde_json::from_str(&eval).unwrap();
    assert!(v["original"]["all_words_acc"].is_number());
}
