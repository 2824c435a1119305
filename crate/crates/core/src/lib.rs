//! Instruments for studying how a small decoder-only transformer turns
//! sub-word tokens back into words, and for adding those words to its
//! vocabulary without touching the core weights.
//!
//! The crate is organized bottom-up:
//!
//! - [`tokenizer`]: byte-level BPE plus split, typo and nonword generators.
//! - [`model`]: the transformer with tracing, interventions and training.
//! - [`probes`]: kNN probing, logit lens and retrieval curves.
//! - [`patchscope`]: decoding hidden states by patching them into a prompt.
//! - [`experiments`]: end-to-end analyses producing per-layer curves.
//! - [`expansion`]: vocabulary expansion from detokenized representations.
//! - [`harness`]: corpora, run configuration and persisted artifacts.

pub mod error;
pub mod expansion;
pub mod experiments;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod patchscope;
pub mod probes;
pub mod tokenizer;

pub use error::{Error, ErrorClass, Result};
