use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum word length (exclusive) for artificial splits.
pub const SPLIT_MIN_CHARS: usize = 3;
/// Minimum word length (exclusive) for typo corruption.
pub const TYPO_MIN_CHARS: usize = 4;
pub const MAX_PIECES: usize = 5;

/// Cuts `word` into `n_pieces` non-empty contiguous pieces at uniformly random
/// character positions.
///
/// `n_pieces == 1` passes the word through unchanged. Encode the pieces with
/// [`Vocabulary::encode_pieces`](super::Vocabulary::encode_pieces).
pub fn artificial_split(word: &str, n_pieces: usize, seed: u64) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    split_with(word, n_pieces, &mut rng)
}

pub(crate) fn split_with<R: Rng>(word: &str, n_pieces: usize, rng: &mut R) -> Result<Vec<String>> {
    if n_pieces == 1 {
        return Ok(vec![word.to_owned()]);
    }
    let chars: Vec<char> = word.chars().collect();
    if chars.len() <= SPLIT_MIN_CHARS {
        return Err(Error::WordTooShort {
            word: word.to_owned(),
            len: chars.len(),
            min: SPLIT_MIN_CHARS,
        });
    }
    if !(2..=MAX_PIECES).contains(&n_pieces) || n_pieces > chars.len() {
        return Err(Error::TooManyPieces {
            requested: n_pieces,
            len: chars.len(),
        });
    }
    let mut cuts: Vec<usize> = sample(rng, chars.len() - 1, n_pieces - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let mut pieces = Vec::with_capacity(n_pieces);
    let mut prev = 0;
    for cut in cuts.into_iter().chain(std::iter::once(chars.len())) {
        pieces.push(chars[prev..cut].iter().collect());
        prev = cut;
    }
    Ok(pieces)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypoKind {
    /// Swap the characters at `position` and `position + 1`.
    SwapAdjacent,
    /// Remove the character at `position`.
    DeleteChar,
    /// Insert a character before `position`.
    InsertChar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypoOp {
    pub kind: TypoKind,
    /// Zero-based character index.
    pub position: usize,
    pub inserted: Option<char>,
}

impl TypoOp {
    pub fn swap(position: usize) -> Self {
        Self {
            kind: TypoKind::SwapAdjacent,
            position,
            inserted: None,
        }
    }

    pub fn delete(position: usize) -> Self {
        Self {
            kind: TypoKind::DeleteChar,
            position,
            inserted: None,
        }
    }

    pub fn insert(position: usize, c: char) -> Self {
        Self {
            kind: TypoKind::InsertChar,
            position,
            inserted: Some(c),
        }
    }
}

/// Applies one transposition, deletion or insertion to `word`.
pub fn perturb_typo(word: &str, op: TypoOp) -> Result<String> {
    let mut chars: Vec<char> = word.chars().collect();
    if chars.len() <= TYPO_MIN_CHARS {
        return Err(Error::WordTooShort {
            word: word.to_owned(),
            len: chars.len(),
            min: TYPO_MIN_CHARS,
        });
    }
    let invalid = |reason| Error::InvalidPosition {
        word: word.to_owned(),
        position: op.position,
        reason,
    };
    if op.inserted.is_some() != (op.kind == TypoKind::InsertChar) {
        return Err(invalid("inserted character must be given exactly for insertions"));
    }
    let p = op.position;
    match (op.kind, op.inserted) {
        (TypoKind::SwapAdjacent, _) => {
            if p + 1 >= chars.len() {
                return Err(invalid("swap needs a following character"));
            }
            if chars[p] == chars[p + 1] {
                return Err(invalid("swapping equal characters is not a typo"));
            }
            chars.swap(p, p + 1);
        }
        (TypoKind::DeleteChar, _) => {
            if p >= chars.len() {
                return Err(invalid("past end of word"));
            }
            chars.remove(p);
        }
        (TypoKind::InsertChar, Some(c)) => {
            if p > chars.len() {
                return Err(invalid("past end of word"));
            }
            chars.insert(p, c);
        }
        (TypoKind::InsertChar, None) => unreachable!("checked above"),
    }
    Ok(chars.into_iter().collect())
}

/// Draws a uniformly random valid typo for `word` (lowercase ASCII insertions).
pub fn random_typo<R: Rng>(word: &str, rng: &mut R) -> Result<TypoOp> {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() <= TYPO_MIN_CHARS {
        return Err(Error::WordTooShort {
            word: word.to_owned(),
            len: chars.len(),
            min: TYPO_MIN_CHARS,
        });
    }
    loop {
        let op = match rng.gen_range(0..3) {
            0 => TypoOp::swap(rng.gen_range(0..chars.len() - 1)),
            1 => TypoOp::delete(rng.gen_range(0..chars.len())),
            _ => TypoOp::insert(
                rng.gen_range(0..=chars.len()),
                char::from(b'a' + rng.gen_range(0..26u8)),
            ),
        };
        if op.kind != TypoKind::SwapAdjacent || chars[op.position] != chars[op.position + 1] {
            return Ok(op);
        }
    }
}
