use std::path::Path;

use lexiscope::experiments::{AblationPolicy, SplitMode};
use lexiscope::harness::{
    run, synth_corpus, verify_manifest, Paths, RunConfig, SynthConfig, CURVES_DIR, MANIFEST_FILE, REPORT_FILE,
};
use lexiscope::model::{save_checkpoint, Model, ModelConfig};
use lexiscope::tokenizer::train_bpe;
use lexiscope::{Error, ErrorClass};

/// Writes a small corpus, vocabulary and untrained model into `dir`.
fn setup(dir: &Path) -> RunConfig {
    let docs = synth_corpus(&SynthConfig {
        n_lines: 300,
        ..Default::default()
    });
    let vocab = train_bpe(docs.join("\n").as_bytes(), 600).unwrap();
    let model = Model::new(ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        vocab_size: vocab.len(),
        max_seq: 48,
        rope_base: 10_000.0,
        seed: 1,
    })
    .unwrap();
    std::fs::write(dir.join("corpus.txt"), docs.join("\n")).unwrap();
    vocab.save(dir.join("vocab.txt")).unwrap();
    save_checkpoint(&model, &dir.join("model.ckpt")).unwrap();
    let text = r#"
experiment = "split-retrieval"
seed = 4
[paths]
corpus = ["corpus.txt"]
checkpoint = "model.ckpt"
vocab = "vocab.txt"
output_dir = "out"
"#;
    RunConfig::from_toml(text, Some(dir)).unwrap()
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let read = || {
        [
            REPORT_FILE,
            MANIFEST_FILE,
            "curves/per_layer.csv",
            "curves/cumulative.csv",
        ]
        .map(|f| std::fs::read(cfg.paths.output_dir.join(f)).unwrap())
    };
    run(&cfg).unwrap();
    let first = read();
    run(&cfg).unwrap();
    assert_eq!(first, read());
}

#[test]
fn manifest_hashes_every_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out = run(&cfg).unwrap();
    let m = verify_manifest(&cfg.paths.output_dir).unwrap();
    assert_eq!(m, out.manifest);
    assert_eq!(m.config_hash, cfg.hash());
    assert_eq!(m.seed, 4);
    let mut on_disk = Vec::new();
    for e in std::fs::read_dir(cfg.paths.output_dir.join(CURVES_DIR)).unwrap() {
        on_disk.push(format!("curves/{}", e.unwrap().file_name().to_string_lossy()));
    }
    on_disk.push(REPORT_FILE.to_owned());
    on_disk.sort();
    assert_eq!(m.files.keys().cloned().collect::<Vec<_>>(), on_disk);

    let csv = std::fs::read_to_string(cfg.paths.output_dir.join("curves/per_layer.csv")).unwrap();
    assert!(csv.starts_with("layer,value\n0,"));
    assert_eq!(csv.lines().count(), 1 + 3);

    std::fs::write(cfg.paths.output_dir.join(REPORT_FILE), "{}").unwrap();
    assert!(verify_manifest(&cfg.paths.output_dir).is_err());
}

#[test]
fn seed_changes_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = setup(dir.path());
    let a = run(&cfg).unwrap().manifest;
    cfg.seed += 1;
    let b = run(&cfg).unwrap().manifest;
    assert_ne!(a.config_hash, b.config_hash);
}

#[test]
fn unknown_experiment_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = setup(dir.path());
    cfg.experiment = "split-retreival".into();
    let err = run(&cfg).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert_eq!(err.class(), ErrorClass::Config);
    assert!(!cfg.paths.output_dir.exists());
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = setup(dir.path());
    cfg.paths.checkpoint = dir.path().join("absent.ckpt");
    assert_eq!(run(&cfg).unwrap_err().class().exit_code(), 3);
}

#[test]
fn ablation_without_policy_matches_plain_retrieval() {
    let dir = tempfile::tempdir().unwrap();
    let mut plain = setup(dir.path());
    plain.retrieval.mode = SplitMode::Suffix;
    let mut ablate = plain.clone();
    ablate.experiment = "ffn-ablation".into();
    ablate.retrieval.policy = AblationPolicy::None;
    ablate.paths.output_dir = dir.path().join("out-ablate");
    let a = run(&ablate).unwrap().report;
    let b = run(&plain).unwrap().report;
    assert!(!a.series.is_empty());
    assert_eq!(a.series, b.series);
    assert_eq!(a.scalars, b.scalars);
}

#[test]
fn every_experiment_runs() {
    let dir = tempfile::tempdir().unwrap();
    let base = setup(dir.path());
    for name in lexiscope::harness::EXPERIMENTS {
        let mut cfg = base.clone();
        cfg.experiment = name.to_owned();
        cfg.paths.output_dir = dir.path().join(name);
        if name == "expand" {
            cfg.paths.test_corpus = cfg.paths.corpus.clone();
            cfg.expand.min_count = 2;
            cfg.expand.refine.steps = 2;
        }
        let out = run(&cfg).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(out.report.name, name);
        assert_eq!(out.report.metadata.seed, 4);
        assert!(out.report.metadata.timestamp.is_none());
    }
}

#[test]
fn paths_resolve_against_the_config_file() {
    let cfg = RunConfig::from_toml(
        "experiment = \"expand\"\n[paths]\ncorpus = [\"a\"]\ntest_corpus = [\"b\"]\ncheckpoint = \"/abs/m\"\nvocab = \"v\"\noutput_dir = \"o\"\n",
        Some(Path::new("/root/x")),
    )
    .unwrap();
    assert_eq!(
        cfg.paths,
        Paths {
            corpus: vec!["/root/x/a".into()],
            checkpoint: "/abs/m".into(),
            vocab: "/root/x/v".into(),
            output_dir: "/root/x/o".into(),
            test_corpus: vec!["/root/x/b".into()],
        }
    );
}
