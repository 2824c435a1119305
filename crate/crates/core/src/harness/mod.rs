//! Corpora, run configuration and persisted artifacts.
//!
//! A run reads a TOML [`RunConfig`], computes one experiment and writes
//! `report.json`, one `curves/<series>.csv` per series and a `manifest.json`
//! hashing every written file. Nothing time-dependent is recorded unless the
//! config supplies a timestamp, so identical configs give identical bytes.

mod config;
mod corpus;
mod run;
mod synth;

pub use config::{
    AttentionParams, PatchscopeParams, Paths, ProbingParams, RetrievalParams, RunConfig, TrainConfig,
    EXPERIMENTS,
};
pub use corpus::{
    ingest, ingest_path, read_documents, training_stream, CorpusIndex, Occurrence, WordFilter,
    DEFAULT_CONTEXT,
};
pub use run::{
    compute, read_report, run, verify_manifest, Manifest, RunOutput, CURVES_DIR, EXPANDED_DIR, MANIFEST_FILE,
    REPORT_FILE,
};
pub use synth::{synth_corpus, SynthConfig, SynthLexicon};
