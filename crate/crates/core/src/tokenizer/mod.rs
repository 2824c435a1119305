//! Byte-level BPE tokenizer plus the word-perturbation generators used by the
//! detokenization experiments (artificial splits, typos, nonwords).
//!
//! Text is first cut into chunks: a run of letters, digits or punctuation,
//! optionally preceded by the single space that separates it from the previous
//! word. That leading space is the word-boundary marker, so word-initial tokens
//! carry it (`" cats"`) while word-internal tokens do not (`"ts"`). Runs of
//! whitespace that are not absorbed this way become their own chunks. Merges
//! never cross chunk boundaries.

mod bpe;
mod file;
mod nonword;
pub mod perturb;

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bpe::train_bpe;
pub use nonword::{make_nonword, NonwordGenerator, WordRecord};
pub use perturb::{artificial_split, perturb_typo, random_typo, TypoKind, TypoOp};

/// Number of byte tokens every vocabulary starts with.
pub const BYTE_ALPHABET: usize = 256;

/// The byte prefixed to word-initial tokens.
pub const BOUNDARY: u8 = b' ';

pub type TokenId = u32;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenIdSeq {
    pub ids: Vec<TokenId>,
    /// Token-index ranges of whitespace-delimited words, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_spans: Option<Vec<Range<usize>>>,
}

impl TokenIdSeq {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Self {
            ids,
            word_spans: None,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl From<Vec<TokenId>> for TokenIdSeq {
    fn from(ids: Vec<TokenId>) -> Self {
        Self::new(ids)
    }
}

/// One pre-tokenized chunk and its encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedChunk {
    pub bytes: Range<usize>,
    pub ids: Vec<TokenId>,
}

impl EncodedChunk {
    pub fn is_whitespace(&self, text: &[u8]) -> bool {
        text[self.bytes.clone()].iter().all(|b| is_space(*b))
    }
}

/// An immutable BPE vocabulary.
///
/// Ids `0..256` are the raw bytes, ids `256..256+merges` are merge outputs in
/// training order, and any remaining ids are whole-word entries added after
/// training (see [`Vocabulary::with_added_words`]).
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<Vec<u8>>,
    merges: Vec<(TokenId, TokenId)>,
    n_added: usize,
    token_index: HashMap<Vec<u8>, TokenId>,
    merge_rank: HashMap<(TokenId, TokenId), u32>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.merges == other.merges && self.n_added == other.n_added
    }
}

impl Vocabulary {
    /// The 256-token byte vocabulary with no merges.
    pub fn bytes_only() -> Self {
        Self::from_merge_ids(Vec::new()).expect("byte vocabulary is always valid")
    }

    /// Builds a vocabulary from merges given as id pairs, in rank order.
    pub fn from_merge_ids(merges: Vec<(TokenId, TokenId)>) -> Result<Self> {
        let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        for (i, &(a, b)) in merges.iter().enumerate() {
            let limit = tokens.len() as TokenId;
            if a >= limit || b >= limit {
                return Err(Error::format(
                    "merge table",
                    format!("merge {i} references a token that does not exist yet"),
                ));
            }
            let mut joined = tokens[a as usize].clone();
            joined.extend_from_slice(&tokens[b as usize]);
            tokens.push(joined);
        }
        Self::assemble(tokens, merges, 0)
    }

    /// Builds a vocabulary from merges given as byte-string pairs, in rank order.
    pub fn from_merges<A: AsRef<[u8]>, B: AsRef<[u8]>>(merges: &[(A, B)]) -> Result<Self> {
        let mut index: HashMap<Vec<u8>, TokenId> = (0..=255u8).map(|b| (vec![b], b as TokenId)).collect();
        let mut ids = Vec::with_capacity(merges.len());
        for (a, b) in merges {
            let lookup = |s: &[u8]| {
                index.get(s).copied().ok_or_else(|| {
                    Error::format(
                        "merge table",
                        format!("unknown merge operand {:?}", String::from_utf8_lossy(s)),
                    )
                })
            };
            let pair = (lookup(a.as_ref())?, lookup(b.as_ref())?);
            let mut joined = a.as_ref().to_vec();
            joined.extend_from_slice(b.as_ref());
            index
                .entry(joined)
                .or_insert((BYTE_ALPHABET + ids.len()) as TokenId);
            ids.push(pair);
        }
        Self::from_merge_ids(ids)
    }

    fn assemble(tokens: Vec<Vec<u8>>, merges: Vec<(TokenId, TokenId)>, n_added: usize) -> Result<Self> {
        let mut token_index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::format("vocabulary", format!("token {id} is empty")));
            }
            // First id wins so that merge outputs duplicating an earlier token stay reachable.
            token_index.entry(t.clone()).or_insert(id as TokenId);
        }
        let merge_rank = merges
            .iter()
            .enumerate()
            .map(|(rank, &pair)| (pair, rank as u32))
            .collect();
        Ok(Self {
            tokens,
            merges,
            n_added,
            token_index,
            merge_rank,
        })
    }

    /// Returns a copy extended with whole-word tokens, one per word, in order.
    ///
    /// Each entry is stored with the boundary marker (`" word"`). Chunks equal to
    /// an added entry encode to that single id, ahead of any BPE merging.
    pub fn with_added_words<S: AsRef<str>>(&self, words: &[S]) -> Result<Self> {
        let mut tokens = self.tokens.clone();
        for w in words {
            let mut bytes = vec![BOUNDARY];
            bytes.extend_from_slice(w.as_ref().as_bytes());
            if self.token_index.contains_key(&bytes) || tokens[self.tokens.len()..].contains(&bytes) {
                return Err(Error::format(
                    "added word",
                    format!("{:?} is already a token", w.as_ref()),
                ));
            }
            tokens.push(bytes);
        }
        Self::assemble(tokens, self.merges.clone(), self.n_added + words.len())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Size of the trained part (bytes plus merges), excluding added words.
    pub fn base_len(&self) -> usize {
        self.tokens.len() - self.n_added
    }

    pub fn n_added(&self) -> usize {
        self.n_added
    }

    pub fn tokens(&self) -> &[Vec<u8>] {
        &self.tokens
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: TokenId) -> Result<&[u8]> {
        self.tokens
            .get(id as usize)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownTokenId {
                id,
                vocab_size: self.tokens.len(),
            })
    }

    /// Lossy string form of one token, for display.
    pub fn token_str(&self, id: TokenId) -> String {
        self.tokens
            .get(id as usize)
            .map(|t| String::from_utf8_lossy(t).into_owned())
            .unwrap_or_else(|| format!("<{id}>"))
    }

    pub fn token_id(&self, bytes: &[u8]) -> Option<TokenId> {
        self.token_index.get(bytes).copied()
    }

    /// Id of a whole-word entry added by [`Vocabulary::with_added_words`].
    pub fn added_id(&self, word: &str) -> Option<TokenId> {
        let mut bytes = vec![BOUNDARY];
        bytes.extend_from_slice(word.as_bytes());
        self.token_index
            .get(&bytes)
            .copied()
            .filter(|&id| id as usize >= self.base_len())
    }

    pub fn is_added(&self, id: TokenId) -> bool {
        (id as usize) >= self.base_len() && (id as usize) < self.tokens.len()
    }

    pub fn encode(&self, text: &str) -> TokenIdSeq {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, text: &[u8]) -> TokenIdSeq {
        let chunks = self.encode_chunks(text);
        let mut ids = Vec::new();
        let mut spans: Vec<Range<usize>> = Vec::new();
        let mut open: Option<usize> = None;
        for chunk in &chunks {
            let start = ids.len();
            ids.extend_from_slice(&chunk.ids);
            if chunk.is_whitespace(text) {
                if let Some(s) = open.take() {
                    spans.push(s..start);
                }
                continue;
            }
            let begins_word = text[chunk.bytes.start] == BOUNDARY || open.is_none();
            if begins_word {
                if let Some(s) = open.take() {
                    spans.push(s..start);
                }
                open = Some(start);
            }
        }
        if let Some(s) = open {
            spans.push(s..ids.len());
        }
        TokenIdSeq {
            ids,
            word_spans: Some(spans),
        }
    }

    /// Encodes chunk by chunk, keeping the byte range of each chunk.
    pub fn encode_chunks(&self, text: &[u8]) -> Vec<EncodedChunk> {
        let mut cache: HashMap<&[u8], Vec<TokenId>> = HashMap::new();
        pretokenize(text)
            .into_iter()
            .map(|range| {
                let bytes = &text[range.clone()];
                let ids = cache
                    .entry(bytes)
                    .or_insert_with(|| self.encode_chunk(bytes))
                    .clone();
                EncodedChunk { bytes: range, ids }
            })
            .collect()
    }

    /// Encodes one pre-tokenized chunk: added-word lookup first, then BPE.
    pub fn encode_chunk(&self, chunk: &[u8]) -> Vec<TokenId> {
        if self.n_added > 0 {
            if let Some(&id) = self.token_index.get(chunk) {
                if id as usize >= self.base_len() {
                    return vec![id];
                }
            }
        }
        let mut symbols: Vec<TokenId> = chunk.iter().map(|&b| b as TokenId).collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.merge_rank.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                .min_by_key(|&(r, _)| r);
            let Some((rank, pair)) = best else { break };
            let merged = (BYTE_ALPHABET as u32 + rank) as TokenId;
            let mut out = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(symbols[i]);
                    i += 1;
                }
            }
            symbols = out;
        }
        symbols
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend_from_slice(self.token_bytes(id)?);
        }
        Ok(out)
    }

    /// Decodes to a string, replacing invalid UTF-8.
    pub fn decode_lossy(&self, ids: &[TokenId]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode(ids)?).into_owned())
    }

    /// Encodes pieces of one word separately and concatenates the ids, giving
    /// the first piece the boundary marker when `word_initial` is set.
    pub fn encode_pieces<S: AsRef<str>>(&self, pieces: &[S], word_initial: bool) -> Vec<TokenId> {
        let mut ids = Vec::new();
        for (i, p) in pieces.iter().enumerate() {
            let mut bytes = Vec::new();
            if i == 0 && word_initial {
                bytes.push(BOUNDARY);
            }
            bytes.extend_from_slice(p.as_ref().as_bytes());
            ids.extend(self.encode_chunk(&bytes));
        }
        ids
    }

    /// Token ids of `word` as it appears after a space.
    pub fn encode_word(&self, word: &str) -> Vec<TokenId> {
        let mut bytes = vec![BOUNDARY];
        bytes.extend_from_slice(word.as_bytes());
        self.encode_bytes(&bytes).ids
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, file::serialize(self)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        file::parse(&text)
    }

    pub fn to_text(&self) -> String {
        file::serialize(self)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        file::parse(text)
    }
}

pub(crate) fn is_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ByteClass {
    Space,
    Letter,
    Digit,
    Punct,
}

fn class_of(b: u8) -> ByteClass {
    if is_space(b) {
        ByteClass::Space
    } else if b.is_ascii_alphabetic() || b >= 0x80 {
        ByteClass::Letter
    } else if b.is_ascii_digit() {
        ByteClass::Digit
    } else {
        ByteClass::Punct
    }
}

/// Splits text into merge-isolated chunks; the chunks tile the input exactly.
pub fn pretokenize(text: &[u8]) -> Vec<Range<usize>> {
    let n = text.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let start = i;
        if is_space(text[i]) {
            let mut j = i;
            while j < n && is_space(text[j]) {
                j += 1;
            }
            let absorbs = j < n && text[j - 1] == BOUNDARY;
            if !absorbs {
                out.push(start..j);
                i = j;
                continue;
            }
            if j - 1 > start {
                out.push(start..j - 1);
            }
            i = j; // the final space is re-attached below
            let class = class_of(text[i]);
            while i < n && class_of(text[i]) == class {
                i += 1;
            }
            out.push(j - 1..i);
            continue;
        }
        let class = class_of(text[i]);
        while i < n && class_of(text[i]) == class {
            i += 1;
        }
        out.push(start..i);
    }
    out
}
