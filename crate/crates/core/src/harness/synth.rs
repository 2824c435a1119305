use std::collections::BTreeSet;

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::experiments::DEFAULT_SUFFIXES;

const ONSETS: [&str; 20] = [
    "b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z", "br", "st", "tr", "pl",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const CODAS: [&str; 6] = ["", "", "n", "r", "s", "l"];

/// Shape of a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_words: usize,
    /// Extra words formed by appending a common suffix to a base word.
    pub n_derived: usize,
    pub n_lines: usize,
    pub successors: usize,
    pub min_sentence: usize,
    pub max_sentence: usize,
    /// Share of `Repeat this word twice` lines.
    pub repeat_fraction: f64,
    /// Share of lines repeating one word five times.
    pub echo_fraction: f64,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_words: 200,
            n_derived: 50,
            n_lines: 20_000,
            successors: 8,
            min_sentence: 4,
            max_sentence: 10,
            repeat_fraction: 0.05,
            echo_fraction: 0.05,
            zipf_exponent: 1.0,
            seed: 0,
        }
    }
}

/// A generated lexicon with its sentence model.
#[derive(Debug, Clone)]
pub struct SynthLexicon {
    /// Words ordered by decreasing frequency.
    pub words: Vec<String>,
    zipf: WeightedIndex<f64>,
    next: Vec<(Vec<usize>, WeightedIndex<f64>)>,
}

fn syllable_word<R: Rng>(rng: &mut R) -> String {
    let n = rng.gen_range(1..=3);
    let mut w = String::new();
    for _ in 0..n {
        w.push_str(ONSETS.choose(rng).unwrap());
        w.push_str(VOWELS.choose(rng).unwrap());
        w.push_str(CODAS.choose(rng).unwrap());
    }
    w
}

fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    (0..n).map(|r| 1.0 / ((r + 1) as f64).powf(s)).collect()
}

impl SynthLexicon {
    pub fn new(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut seen = BTreeSet::new();
        let mut base = Vec::new();
        while base.len() < cfg.n_words {
            let w = syllable_word(&mut rng);
            if w.len() >= 3 && seen.insert(w.clone()) {
                base.push(w);
            }
        }
        let mut words = base.clone();
        let mut tries = 0;
        while words.len() < cfg.n_words + cfg.n_derived && tries < 100 * cfg.n_derived.max(1) {
            tries += 1;
            let w = format!(
                "{}{}",
                base.choose(&mut rng).unwrap(),
                DEFAULT_SUFFIXES.choose(&mut rng).unwrap()
            );
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        words.shuffle(&mut rng);
        let n = words.len();
        let zipf = WeightedIndex::new(zipf_weights(n, cfg.zipf_exponent)).expect("non-empty lexicon");
        let next = (0..n)
            .map(|_| {
                let succ: Vec<usize> = (0..cfg.successors.max(1))
                    .map(|_| zipf.sample(&mut rng))
                    .collect();
                let w: Vec<f64> = (0..succ.len()).map(|_| rng.gen_range(0.2..1.0)).collect();
                (succ, WeightedIndex::new(w).unwrap())
            })
            .collect();
        Self { words, zipf, next }
    }

    pub fn sample_word<R: Rng>(&self, rng: &mut R) -> &str {
        &self.words[self.zipf.sample(rng)]
    }

    pub fn sentence<R: Rng>(&self, len: usize, rng: &mut R) -> String {
        let mut i = self.zipf.sample(rng);
        let mut out = self.words[i].clone();
        for _ in 1..len {
            let (succ, w) = &self.next[i];
            i = if rng.gen_bool(0.2) {
                self.zipf.sample(rng)
            } else {
                succ[w.sample(rng)]
            };
            out.push(' ');
            out.push_str(&self.words[i]);
        }
        out.push('.');
        out
    }
}

/// Lines of a seeded synthetic corpus: bigram sentences plus a few repetition
/// lines built from the same lexicon.
pub fn synth_corpus(cfg: &SynthConfig) -> Vec<String> {
    let lex = SynthLexicon::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    (0..cfg.n_lines)
        .map(|_| {
            let u: f64 = rng.gen();
            if u < cfg.repeat_fraction {
                let w = lex.sample_word(&mut rng);
                format!("Repeat this word twice: 1) {w} 2) {w}")
            } else if u < cfg.repeat_fraction + cfg.echo_fraction {
                let w = lex.sample_word(&mut rng);
                [w; 5].join(" ")
            } else {
                let len = rng.gen_range(cfg.min_sentence..=cfg.max_sentence);
                lex.sentence(len, &mut rng)
            }
        })
        .collect()
}
