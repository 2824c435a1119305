//! Plain-text vocabulary format.
//!
//! ```text
//! #lexiscope-vocab v1
//! #TOKENS <n>
//! <token>            one per line, n lines, id order
//! #MERGES <m>
//! <left> <right>     one per line, rank order
//! #ADDED <k>
//! ```
//!
//! Tokens are escaped so that every line is printable ASCII without spaces:
//! bytes `!`..`~` other than `\` and `#` are literal, `\` is `\\`, everything
//! else is `\xHH`. The last `k` tokens are whole-word additions.

use std::fmt::Write;

use super::{TokenId, Vocabulary, BYTE_ALPHABET};
use crate::error::{Error, Result};

const MAGIC: &str = "#lexiscope-vocab v1";

pub(super) fn escape(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len());
    for &b in bytes {
        match b {
            b'\\' => s.push_str("\\\\"),
            b'#' => s.push_str("\\x23"),
            0x21..=0x7e => s.push(b as char),
            _ => {
                let _ = write!(s, "\\x{b:02x}");
            }
        }
    }
    s
}

pub(super) fn unescape(s: &str) -> Result<Vec<u8>> {
    let bad = || Error::format("vocabulary token", format!("bad escape in {s:?}"));
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'\\' {
            out.push(bytes[i]);
            i += 1;
            continue;
        }
        match bytes.get(i + 1) {
            Some(b'\\') => {
                out.push(b'\\');
                i += 2;
            }
            Some(b'x') => {
                let hex = s.get(i + 2..i + 4).ok_or_else(bad)?;
                out.push(u8::from_str_radix(hex, 16).map_err(|_| bad())?);
                i += 4;
            }
            _ => return Err(bad()),
        }
    }
    if out.is_empty() {
        return Err(Error::format("vocabulary token", "empty token"));
    }
    Ok(out)
}

pub(super) fn serialize(v: &Vocabulary) -> String {
    let mut s = String::new();
    s.push_str(MAGIC);
    s.push('\n');
    let _ = writeln!(s, "#TOKENS {}", v.len());
    for t in v.tokens() {
        s.push_str(&escape(t));
        s.push('\n');
    }
    let _ = writeln!(s, "#MERGES {}", v.merges().len());
    for &(a, b) in v.merges() {
        let _ = writeln!(
            s,
            "{} {}",
            escape(&v.tokens()[a as usize]),
            escape(&v.tokens()[b as usize])
        );
    }
    let _ = writeln!(s, "#ADDED {}", v.n_added());
    s
}

fn section_count(line: Option<&str>, name: &str) -> Result<usize> {
    let line = line.ok_or_else(|| Error::format("vocabulary file", format!("missing #{name}")))?;
    line.strip_prefix(&format!("#{name} "))
        .and_then(|n| n.trim().parse().ok())
        .ok_or_else(|| {
            Error::format(
                "vocabulary file",
                format!("expected #{name} <count>, got {line:?}"),
            )
        })
}

pub(super) fn parse(text: &str) -> Result<Vocabulary> {
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::format("vocabulary file", "missing header"));
    }
    let n_tokens = section_count(lines.next(), "TOKENS")?;
    let mut tokens = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        let line = lines
            .next()
            .ok_or_else(|| Error::format("vocabulary file", "truncated token list"))?;
        tokens.push(unescape(line)?);
    }
    let n_merges = section_count(lines.next(), "MERGES")?;
    let mut merges = Vec::with_capacity(n_merges);
    for i in 0..n_merges {
        let line = lines
            .next()
            .ok_or_else(|| Error::format("vocabulary file", "truncated merge list"))?;
        let (a, b) = line
            .split_once(' ')
            .ok_or_else(|| Error::format("vocabulary file", format!("bad merge line {line:?}")))?;
        let (a, b) = (unescape(a)?, unescape(b)?);
        let lookup = |t: &[u8]| -> Result<TokenId> {
            tokens[..BYTE_ALPHABET + i]
                .iter()
                .position(|x| x.as_slice() == t)
                .map(|p| p as TokenId)
                .ok_or_else(|| Error::format("vocabulary file", format!("merge {i} operand not yet defined")))
        };
        merges.push((lookup(&a)?, lookup(&b)?));
    }
    let n_added = section_count(lines.next(), "ADDED")?;
    if n_tokens != BYTE_ALPHABET + n_merges + n_added {
        return Err(Error::format(
            "vocabulary file",
            format!("{n_tokens} tokens != 256 + {n_merges} merges + {n_added} added"),
        ));
    }
    let base = Vocabulary::from_merge_ids(merges)?;
    if base.tokens() != &tokens[..base.len()] {
        return Err(Error::format(
            "vocabulary file",
            "token list disagrees with merge table",
        ));
    }
    if n_added == 0 {
        return Ok(base);
    }
    let words: Vec<String> = tokens[base.len()..]
        .iter()
        .map(|t| {
            t.strip_prefix(b" ")
                .and_then(|w| std::str::from_utf8(w).ok())
                .map(str::to_owned)
                .ok_or_else(|| Error::format("vocabulary file", "added token lacks boundary marker"))
        })
        .collect::<Result<_>>()?;
    base.with_added_words(&words)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn file_round_trip_with_added_words() {
        let v = Vocabulary::from_merges(&[("#", "#"), (" ", "\\"), ("a", "b")])
            .unwrap()
            .with_added_words(&["abc", "xyz"])
            .unwrap();
        let text = serialize(&v);
        let back = parse(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.added_id("xyz"), v.added_id("xyz"));
        assert!(text.lines().skip(2).take(v.len()).all(|l| !l.starts_with('#')));
    }

    #[test]
    fn inconsistent_file_is_rejected() {
        let v = Vocabulary::from_merges(&[("a", "b")]).unwrap();
        let text = serialize(&v).replacen("#MERGES 1", "#MERGES 0", 1);
        assert!(parse(&text).is_err());
        assert!(parse("garbage").is_err());
    }

    proptest! {
        #[test]
        fn escape_round_trips(bytes in proptest::collection::vec(any::<u8>(), 1..16)) {
            let e = escape(&bytes);
            prop_assert!(!e.contains(' ') && !e.contains('\n') && !e.starts_with('#'));
            prop_assert_eq!(unescape(&e).unwrap(), bytes);
        }
    }
}
