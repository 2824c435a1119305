use std::collections::HashMap;

use super::{pretokenize, TokenId, Vocabulary, BYTE_ALPHABET};
use crate::error::{Error, Result};

/// Trains a byte-level BPE vocabulary of exactly `vocab_size` tokens.
///
/// Each step merges the most frequent adjacent pair; ties go to the pair whose
/// first occurrence in the corpus comes earliest.
pub fn train_bpe(corpus: &[u8], vocab_size: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if vocab_size < BYTE_ALPHABET {
        return Err(Error::CorpusTooSmall {
            reached: BYTE_ALPHABET,
            requested: vocab_size,
        });
    }

    // Distinct chunks in order of first appearance, with their counts.
    let mut index: HashMap<&[u8], usize> = HashMap::new();
    let mut words: Vec<(Vec<TokenId>, u64)> = Vec::new();
    for range in pretokenize(corpus) {
        let bytes = &corpus[range];
        match index.get(bytes) {
            Some(&i) => words[i].1 += 1,
            None => {
                index.insert(bytes, words.len());
                words.push((bytes.iter().map(|&b| b as TokenId).collect(), 1));
            }
        }
    }

    let mut merges: Vec<(TokenId, TokenId)> = Vec::new();
    while BYTE_ALPHABET + merges.len() < vocab_size {
        // (count, first occurrence as (chunk rank, position))
        let mut stats: HashMap<(TokenId, TokenId), (u64, (usize, usize))> = HashMap::new();
        for (rank, (symbols, count)) in words.iter().enumerate() {
            for (pos, w) in symbols.windows(2).enumerate() {
                stats
                    .entry((w[0], w[1]))
                    .and_modify(|s| s.0 += count)
                    .or_insert((*count, (rank, pos)));
            }
        }
        let best = stats
            .into_iter()
            .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)));
        let Some((pair, _)) = best else {
            return Err(Error::CorpusTooSmall {
                reached: BYTE_ALPHABET + merges.len(),
                requested: vocab_size,
            });
        };
        let new_id = (BYTE_ALPHABET + merges.len()) as TokenId;
        for (symbols, _) in &mut words {
            merge_in_place(symbols, pair, new_id);
        }
        merges.push(pair);
    }
    Vocabulary::from_merge_ids(merges)
}

fn merge_in_place(symbols: &mut Vec<TokenId>, pair: (TokenId, TokenId), new_id: TokenId) {
    if symbols.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    *symbols = out;
}
