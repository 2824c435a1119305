use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::expansion::ExpandOptions;
use crate::experiments::{AblationPolicy, SplitMode, TokenPosition};
use crate::patchscope::{PatchMode, REPEAT_TEMPLATE};
use crate::probes::DEFAULT_K;

use super::corpus::{read_documents, training_stream, DEFAULT_CONTEXT};
use crate::model::{ModelConfig, TrainHyper};
use crate::tokenizer::{TokenId, Vocabulary};

/// Experiment names accepted by [`RunConfig::experiment`].
pub const EXPERIMENTS: [&str; 8] = [
    "word-vs-nonword",
    "split-retrieval",
    "ffn-retrieval",
    "ffn-ablation",
    "patchscope-retrieval",
    "multi-token-retrieval",
    "attention-aggregation",
    "expand",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: Vec<PathBuf>,
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    pub output_dir: PathBuf,
    /// Held-out text for expansion candidates and evaluation.
    #[serde(default)]
    pub test_corpus: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbingParams {
    pub position: TokenPosition,
    pub k: usize,
}

impl Default for ProbingParams {
    fn default() -> Self {
        Self {
            position: TokenPosition::Last,
            k: DEFAULT_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalParams {
    pub mode: SplitMode,
    pub policy: AblationPolicy,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            mode: SplitMode::Artificial,
            policy: AblationPolicy::Targeted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchscopeParams {
    pub template: String,
    pub mode: PatchMode,
}

impl Default for PatchscopeParams {
    fn default() -> Self {
        Self {
            template: REPEAT_TEMPLATE.to_owned(),
            mode: PatchMode::Input,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionParams {
    pub max_word_tokens: usize,
}

impl Default for AttentionParams {
    fn default() -> Self {
        Self { max_word_tokens: 5 }
    }
}

fn default_context() -> usize {
    DEFAULT_CONTEXT
}

/// One run: what to compute, on which inputs, with which parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: String,
    #[serde(default)]
    pub seed: u64,
    /// Preceding tokens kept with each word, capped by the model's window.
    #[serde(default = "default_context")]
    pub context: usize,
    /// Copied into report metadata when set.
    #[serde(default)]
    pub timestamp: Option<String>,
    pub paths: Paths,
    #[serde(default)]
    pub probing: ProbingParams,
    #[serde(default)]
    pub retrieval: RetrievalParams,
    #[serde(default)]
    pub patchscope: PatchscopeParams,
    #[serde(default)]
    pub attention: AttentionParams,
    #[serde(default)]
    pub expand: ExpandOptions,
}

impl RunConfig {
    /// Parses TOML. Relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(base) = base {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            cfg.paths.corpus.iter_mut().for_each(fix);
            cfg.paths.test_corpus.iter_mut().for_each(fix);
            fix(&mut cfg.paths.checkpoint);
            fix(&mut cfg.paths.vocab);
            fix(&mut cfg.paths.output_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        if !EXPERIMENTS.contains(&self.experiment.as_str()) {
            return Err(Error::Config(format!(
                "unknown experiment {:?}; expected one of {}",
                self.experiment,
                EXPERIMENTS.join(", ")
            )));
        }
        if self.paths.corpus.is_empty() {
            return Err(Error::Config("paths.corpus lists no files".into()));
        }
        if self.experiment == "expand" && self.paths.test_corpus.is_empty() {
            return Err(Error::Config("expand needs paths.test_corpus".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of every field.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

fn default_split_prob() -> f64 {
    0.1
}

/// Model training setup: architecture, optimizer and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub vocab: PathBuf,
    pub corpus: Vec<PathBuf>,
    /// Chance of replacing a long single-token word by a random split of
    /// itself in the training stream.
    #[serde(default = "default_split_prob")]
    pub split_prob: f64,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainHyper,
}

impl TrainConfig {
    pub fn from_toml(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(base) = base {
            if cfg.vocab.is_relative() {
                cfg.vocab = base.join(&cfg.vocab);
            }
            for p in &mut cfg.corpus {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        if !(0.0..=1.0).contains(&cfg.split_prob) {
            return Err(Error::Config(format!(
                "split_prob {} is not a probability",
                cfg.split_prob
            )));
        }
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path.parent())
    }

    /// The augmented training stream for this config.
    pub fn stream(&self, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
        if vocab.len() != self.model.vocab_size {
            return Err(Error::Config(format!(
                "model.vocab_size {} does not match the vocabulary's {} tokens",
                self.model.vocab_size,
                vocab.len()
            )));
        }
        let docs = read_documents(&self.corpus)?;
        training_stream(vocab, &docs, self.split_prob, self.train.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
experiment = "split-retrieval"
seed = 3
[paths]
corpus = ["c.txt"]
checkpoint = "m.ckpt"
vocab = "v.txt"
output_dir = "out"
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = RunConfig::from_toml(MINIMAL, Some(Path::new("/base"))).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.context, DEFAULT_CONTEXT);
        assert_eq!(cfg.paths.corpus, vec![PathBuf::from("/base/c.txt")]);
        assert_eq!(cfg.retrieval.mode, SplitMode::Artificial);
        assert_eq!(cfg.expand, ExpandOptions::default());
    }

    #[test]
    fn rejects_unknown_fields_and_names() {
        let extra = format!("{MINIMAL}\n[retrieval]\nmode = \"typo\"\nbogus = 1\n");
        assert!(matches!(
            RunConfig::from_toml(&extra, None),
            Err(Error::Config(_))
        ));
        let top = MINIMAL.replace("seed = 3", "seed = 3\ncolour = 1");
        assert!(RunConfig::from_toml(&top, None).is_err());
        let bad = MINIMAL.replace("split-retrieval", "split-retreival");
        let err = RunConfig::from_toml(&bad, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(err.class().exit_code(), 2);
    }

    #[test]
    fn hash_covers_every_field() {
        let a = RunConfig::from_toml(MINIMAL, None).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.expand.refine.lr *= 2.0;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.attention.max_word_tokens += 1;
        assert_ne!(a.hash(), c.hash());
        let mut d = a.clone();
        d.timestamp = Some("now".into());
        assert_ne!(a.hash(), d.hash());
    }

    #[test]
    fn train_config() {
        let text = r#"
vocab = "v.txt"
corpus = ["a.txt"]
[model]
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
vocab_size = 300
max_seq = 32
[train]
steps = 10
batch_size = 2
seq_len = 16
lr = 0.01
"#;
        let cfg = TrainConfig::from_toml(text, Some(Path::new("/d"))).unwrap();
        assert_eq!(cfg.corpus, vec![PathBuf::from("/d/a.txt")]);
        assert_eq!(cfg.split_prob, 0.1);
        assert_eq!(cfg.train.warmup, 20);
        assert!(TrainConfig::from_toml(&text.replace("n_heads = 2", "n_heads = 3"), None).is_err());
        assert!(matches!(
            cfg.stream(&Vocabulary::bytes_only()),
            Err(Error::Config(_))
        ));
    }
}
