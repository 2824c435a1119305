use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TokenId, TokenIdSeq, Vocabulary};
use crate::error::{Error, Result};

/// A word occurrence with its token ids and up to a fixed number of preceding
/// context tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordRecord {
    pub surface: String,
    pub token_ids: Vec<TokenId>,
    pub context_ids: Vec<TokenId>,
}

impl WordRecord {
    pub fn new(surface: impl Into<String>, token_ids: Vec<TokenId>, context_ids: Vec<TokenId>) -> Self {
        Self {
            surface: surface.into(),
            token_ids,
            context_ids,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.token_ids.len()
    }

    /// Context followed by the word tokens.
    pub fn input_ids(&self) -> Vec<TokenId> {
        let mut ids = self.context_ids.clone();
        ids.extend_from_slice(&self.token_ids);
        ids
    }

    /// Drops the oldest context tokens so that context plus `extra` tokens fit in `max_len`.
    pub fn truncate_context(&mut self, extra: usize, max_len: usize) {
        let keep = max_len.saturating_sub(extra);
        if self.context_ids.len() > keep {
            self.context_ids.drain(..self.context_ids.len() - keep);
        }
    }
}

const NONWORD_ATTEMPTS: usize = 1000;

/// Samples position-preserving token shuffles of a word pool.
///
/// The first token of every nonword comes from tokens seen word-initially, the
/// last from tokens seen word-finally, and anything in between from tokens seen
/// word-internally. Token draws follow the observed per-role frequencies, and
/// lengths follow the pool's length distribution.
#[derive(Debug, Clone)]
pub struct NonwordGenerator<'v> {
    vocab: &'v Vocabulary,
    initial: Vec<TokenId>,
    internal: Vec<TokenId>,
    last: Vec<TokenId>,
    lengths: Vec<usize>,
    real: HashSet<String>,
}

impl<'v> NonwordGenerator<'v> {
    pub fn new(vocab: &'v Vocabulary, words: &[WordRecord]) -> Result<Self> {
        let mut gen = Self {
            vocab,
            initial: Vec::new(),
            internal: Vec::new(),
            last: Vec::new(),
            lengths: Vec::new(),
            real: HashSet::new(),
        };
        for w in words {
            let ids = &w.token_ids;
            if ids.len() < 2 {
                continue;
            }
            gen.initial.push(ids[0]);
            gen.internal.extend_from_slice(&ids[1..ids.len() - 1]);
            gen.last.push(ids[ids.len() - 1]);
            gen.lengths.push(ids.len());
            gen.real.insert(w.surface.trim().to_owned());
            gen.real.insert(vocab.decode_lossy(ids)?.trim().to_owned());
        }
        Ok(gen)
    }

    /// One nonword, or `NoValidNonword` once the resampling budget is spent.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<TokenIdSeq> {
        if self.lengths.is_empty() {
            return Err(Error::NoValidNonword { attempts: 0 });
        }
        for _ in 0..NONWORD_ATTEMPTS {
            let len = self.lengths[rng.gen_range(0..self.lengths.len())];
            if len > 2 && self.internal.is_empty() {
                continue;
            }
            let mut ids = Vec::with_capacity(len);
            ids.push(self.initial[rng.gen_range(0..self.initial.len())]);
            for _ in 0..len - 2 {
                ids.push(self.internal[rng.gen_range(0..self.internal.len())]);
            }
            ids.push(self.last[rng.gen_range(0..self.last.len())]);
            let text = self.vocab.decode_lossy(&ids)?;
            if !self.real.contains(text.trim()) {
                return Ok(TokenIdSeq::new(ids));
            }
        }
        Err(Error::NoValidNonword {
            attempts: NONWORD_ATTEMPTS,
        })
    }
}

/// Generates one nonword from the pool under `seed`.
pub fn make_nonword(vocab: &Vocabulary, words: &[WordRecord], seed: u64) -> Result<TokenIdSeq> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NonwordGenerator::new(vocab, words)?.sample(&mut rng)
}
