use std::collections::BTreeMap;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiments::DEFAULT_SUFFIXES;
use crate::tokenizer::perturb::{split_with, MAX_PIECES, SPLIT_MIN_CHARS, TYPO_MIN_CHARS};
use crate::tokenizer::{TokenId, Vocabulary, WordRecord};

/// Preceding tokens kept with each word occurrence.
pub const DEFAULT_CONTEXT: usize = 100;

/// Where one boundary-marked word occurrence sits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occurrence {
    pub doc: usize,
    pub tokens: Range<usize>,
}

/// Tokenized documents with word statistics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusIndex {
    pub documents: Vec<Vec<TokenId>>,
    /// Case-sensitive counts of whitespace-delimited alphabetic words, with
    /// surrounding punctuation stripped.
    pub word_freq: BTreeMap<String, usize>,
    /// Occurrences preceded by a space, where the word is one pre-token chunk.
    pub occurrences: BTreeMap<String, Vec<Occurrence>>,
    /// SHA-256 of the raw document text.
    pub corpus_id: String,
}

/// Word filters used by the experiments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WordFilter {
    /// One token and more than `min_chars` characters.
    SingleToken {
        min_chars: usize,
    },
    MultiToken,
    /// Single-token words ending in one of the default suffixes.
    SuffixSplit,
    /// Multi-token words seen at least `m` times.
    Frequent {
        m: usize,
    },
    Any,
}

impl WordFilter {
    pub fn single_token() -> Self {
        WordFilter::SingleToken {
            min_chars: SPLIT_MIN_CHARS,
        }
    }

    pub fn typo() -> Self {
        WordFilter::SingleToken {
            min_chars: TYPO_MIN_CHARS,
        }
    }
}

/// Byte ranges of stripped alphabetic words in `text`, and whether each one
/// directly follows a space.
fn word_ranges(text: &str) -> Vec<(Range<usize>, bool)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let mut s = start;
        let mut e = i;
        while s < e && bytes[s].is_ascii_punctuation() {
            s += 1;
        }
        while e > s && bytes[e - 1].is_ascii_punctuation() {
            e -= 1;
        }
        if s < e && bytes[s..e].iter().all(u8::is_ascii_alphabetic) {
            out.push((s..e, s == start && s > 0 && bytes[s - 1] == b' '));
        }
    }
    out
}

fn hash_documents(docs: &[String]) -> String {
    let mut h = Sha256::new();
    for d in docs {
        h.update(d.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

impl CorpusIndex {
    pub fn empty() -> Self {
        Self::from_documents::<&str>(&[], &Vocabulary::bytes_only())
    }

    /// Indexes already-split documents.
    pub fn from_documents<S: AsRef<str>>(docs: &[S], vocab: &Vocabulary) -> Self {
        let owned: Vec<String> = docs.iter().map(|d| d.as_ref().to_owned()).collect();
        let mut documents = Vec::with_capacity(docs.len());
        let mut word_freq: BTreeMap<String, usize> = BTreeMap::new();
        let mut occurrences: BTreeMap<String, Vec<Occurrence>> = BTreeMap::new();
        for (di, doc) in owned.iter().enumerate() {
            let chunks = vocab.encode_chunks(doc.as_bytes());
            let mut starts = BTreeMap::new();
            let mut ids = Vec::new();
            for c in &chunks {
                starts.insert(c.bytes.start, (c.bytes.end, ids.len(), c.ids.len()));
                ids.extend_from_slice(&c.ids);
            }
            for (range, spaced) in word_ranges(doc) {
                let word = &doc[range.clone()];
                *word_freq.entry(word.to_owned()).or_default() += 1;
                if !spaced {
                    continue;
                }
                if let Some(&(end, tok, n)) = starts.get(&(range.start - 1)) {
                    if end == range.end {
                        occurrences.entry(word.to_owned()).or_default().push(Occurrence {
                            doc: di,
                            tokens: tok..tok + n,
                        });
                    }
                }
            }
            documents.push(ids);
        }
        Self {
            documents,
            word_freq,
            occurrences,
            corpus_id: hash_documents(&owned),
        }
    }

    /// Tokens of one word as the corpus spells it (first occurrence).
    pub fn word_tokens(&self, word: &str) -> Option<&[TokenId]> {
        let occ = self.occurrences.get(word)?.first()?;
        Some(&self.documents[occ.doc][occ.tokens.clone()])
    }

    pub fn matches(&self, word: &str, filter: &WordFilter) -> bool {
        let Some(tokens) = self.word_tokens(word) else {
            return false;
        };
        let n_chars = word.chars().count();
        match filter {
            WordFilter::SingleToken { min_chars } => tokens.len() == 1 && n_chars > *min_chars,
            WordFilter::MultiToken => tokens.len() >= 2,
            WordFilter::SuffixSplit => {
                tokens.len() == 1
                    && n_chars > SPLIT_MIN_CHARS
                    && DEFAULT_SUFFIXES
                        .iter()
                        .any(|s| word.strip_suffix(s).is_some_and(|r| r.len() >= 2))
            }
            WordFilter::Frequent { m } => tokens.len() >= 2 && self.word_freq[word] >= *m,
            WordFilter::Any => true,
        }
    }

    /// Words passing `filter`, in lexicographic order.
    pub fn eligible(&self, filter: &WordFilter) -> Vec<String> {
        self.occurrences
            .keys()
            .filter(|w| self.matches(w, filter))
            .cloned()
            .collect()
    }

    pub fn record(&self, word: &str, occurrence: &Occurrence, context: usize) -> WordRecord {
        let doc = &self.documents[occurrence.doc];
        let start = occurrence.tokens.start.saturating_sub(context);
        WordRecord::new(
            word,
            doc[occurrence.tokens.clone()].to_vec(),
            doc[start..occurrence.tokens.start].to_vec(),
        )
    }

    /// One record per eligible word, each at a seeded random occurrence.
    pub fn records(&self, filter: &WordFilter, context: usize, seed: u64) -> Vec<WordRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.eligible(filter)
            .iter()
            .map(|w| {
                let occ = self.occurrences[w]
                    .choose(&mut rng)
                    .expect("eligible words occur");
                self.record(w, occ, context)
            })
            .collect()
    }

    /// Documents joined by a newline token, for training.
    pub fn stream(&self, vocab: &Vocabulary) -> Vec<TokenId> {
        let sep = vocab.encode("\n").ids;
        let mut out = Vec::new();
        for d in &self.documents {
            out.extend_from_slice(d);
            out.extend_from_slice(&sep);
        }
        out
    }

    pub fn n_tokens(&self) -> usize {
        self.documents.iter().map(Vec::len).sum()
    }
}

/// Reads UTF-8 text files; every non-empty line is a document.
pub fn read_documents(paths: &[PathBuf]) -> Result<Vec<String>> {
    let mut docs = Vec::new();
    for path in paths {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Encoding(path.clone()))?;
        docs.extend(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_owned));
    }
    Ok(docs)
}

pub fn ingest(paths: &[PathBuf], vocab: &Vocabulary) -> Result<CorpusIndex> {
    Ok(CorpusIndex::from_documents(&read_documents(paths)?, vocab))
}

pub fn ingest_path(path: &Path, vocab: &Vocabulary) -> Result<CorpusIndex> {
    ingest(&[path.to_path_buf()], vocab)
}

/// Encodes documents for training. With probability `split_prob`, each
/// boundary-marked single-token word longer than three characters is replaced
/// by a random 2–5 piece split of itself.
pub fn training_stream<S: AsRef<str>>(
    vocab: &Vocabulary,
    docs: &[S],
    split_prob: f64,
    seed: u64,
) -> Result<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sep = vocab.encode("\n").ids;
    let mut out = Vec::new();
    for doc in docs {
        let text = doc.as_ref().as_bytes();
        for chunk in vocab.encode_chunks(text) {
            let bytes = &text[chunk.bytes.clone()];
            let word = &bytes[1.min(bytes.len())..];
            let splittable = chunk.ids.len() == 1
                && bytes.first() == Some(&b' ')
                && word.len() > SPLIT_MIN_CHARS
                && word.iter().all(u8::is_ascii_alphabetic);
            if splittable && split_prob > 0.0 && rng.gen_bool(split_prob) {
                let word = std::str::from_utf8(word).expect("ascii");
                let n = rng.gen_range(2..=MAX_PIECES.min(word.len()));
                out.extend(vocab.encode_pieces(&split_with(word, n, &mut rng)?, true));
            } else {
                out.extend_from_slice(&chunk.ids);
            }
        }
        out.extend_from_slice(&sep);
    }
    Ok(out)
}
