use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ExperimentReport, Series};
use crate::error::{Error, Result};
use crate::model::{forward, Model};
use crate::probes::{Label, ProbeDataset, ProbePoint};
use crate::tokenizer::{NonwordGenerator, TokenId, Vocabulary, WordRecord};

/// Which token of an item the probe reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenPosition {
    #[default]
    Last,
    Penultimate,
}

impl TokenPosition {
    fn index(self, len: usize) -> usize {
        match self {
            TokenPosition::Last => len - 1,
            TokenPosition::Penultimate => len - 2,
        }
    }
}

/// Per-layer kNN eval accuracy. `points[ℓ]` holds the labelled vectors of
/// layer `ℓ`; every layer uses the same seeded split.
pub fn probe_accuracy_by_layer(points: &[Vec<ProbePoint>], seed: u64, k: usize) -> Result<Vec<f64>> {
    points
        .iter()
        .enumerate()
        .map(|(layer, pts)| ProbeDataset::split(layer, pts.clone(), seed).eval_accuracy(k))
        .collect()
}

/// `n` nonwords sampled from the multi-token words of `words`.
pub fn sample_nonwords(
    vocab: &Vocabulary,
    words: &[WordRecord],
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<TokenId>>> {
    let gen = NonwordGenerator::new(vocab, words)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| gen.sample(&mut rng).map(|s| s.ids)).collect()
}

/// kNN word/nonword probing at every layer, on items fed without context.
pub fn word_vs_nonword(
    model: &Model,
    words: &[Vec<TokenId>],
    nonwords: &[Vec<TokenId>],
    position: TokenPosition,
    seed: u64,
    k: usize,
) -> Result<ExperimentReport> {
    if words.is_empty() || nonwords.is_empty() {
        return Err(Error::NoEligibleWords(
            "word/nonword probing needs both classes".into(),
        ));
    }
    let diff = words.len().abs_diff(nonwords.len()) as f64;
    if diff > 0.01 * words.len().max(nonwords.len()) as f64 {
        return Err(Error::UnbalancedDataset {
            words: words.len(),
            nonwords: nonwords.len(),
        });
    }
    if let Some(short) = words.iter().chain(nonwords).find(|ids| ids.len() < 2) {
        return Err(Error::NoEligibleWords(format!(
            "probing items must be multi-token, found {} token(s)",
            short.len()
        )));
    }
    let n_layers = model.n_layers() + 1;
    let mut points: Vec<Vec<ProbePoint>> = vec![Vec::new(); n_layers];
    let labelled = words
        .iter()
        .map(|w| (w, Label::Word))
        .chain(nonwords.iter().map(|w| (w, Label::Nonword)));
    for (ids, label) in labelled {
        let trace = forward(model, ids, &[])?;
        let p = position.index(ids.len());
        for (l, layer_points) in points.iter_mut().enumerate() {
            layer_points.push(ProbePoint {
                vector: trace.hidden_at(l, p).to_vec(),
                label,
            });
        }
    }
    let acc = probe_accuracy_by_layer(&points, seed, k)?;
    let mut report = ExperimentReport::new("word-vs-nonword");
    report.series.push(Series::new("accuracy", acc));
    report.scalars.insert("n_words".into(), words.len() as f64);
    report.scalars.insert("n_nonwords".into(), nonwords.len() as f64);
    Ok(report)
}
