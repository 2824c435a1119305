//! Read-only probes over hidden states: a kNN word/nonword classifier, the
//! input-embedding logit lens and its cosine variant, and retrieval curves.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::tokenizer::TokenId;

pub const DEFAULT_K: usize = 4;
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Word,
    Nonword,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub vector: Vec<f64>,
    pub label: Label,
}

/// Labelled hidden states from one layer, split into train and eval parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeDataset {
    pub layer: usize,
    pub train: Vec<ProbePoint>,
    pub eval: Vec<ProbePoint>,
}

impl ProbeDataset {
    /// Stratified split: each label is shuffled under `seed` and 80% of it goes
    /// to training. Both labels use the same permutation stream.
    pub fn split(layer: usize, points: Vec<ProbePoint>, seed: u64) -> Self {
        let mut train = Vec::new();
        let mut eval = Vec::new();
        for label in [Label::Word, Label::Nonword] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut group: Vec<ProbePoint> = points.iter().filter(|p| p.label == label).cloned().collect();
            group.shuffle(&mut rng);
            let n_train = (group.len() as f64 * TRAIN_FRACTION).round() as usize;
            let rest = group.split_off(n_train);
            train.extend(group);
            eval.extend(rest);
        }
        Self { layer, train, eval }
    }

    /// Fraction of eval points that kNN on the train part labels correctly.
    pub fn eval_accuracy(&self, k: usize) -> Result<f64> {
        if self.eval.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut correct = 0usize;
        for p in &self.eval {
            if knn_classify(&self.train, &p.vector, k)? == p.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / self.eval.len() as f64)
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Majority label among the `k` Euclidean-nearest training points.
///
/// Distance ties go to the lower point index; vote ties go to [`Label::Word`].
/// `k` is clamped to the training-set size.
pub fn knn_classify(train: &[ProbePoint], query: &[f64], k: usize) -> Result<Label> {
    if train.is_empty() {
        return Err(Error::EmptyTrainSet);
    }
    let k = k.clamp(1, train.len());
    // (distance, index) of the current k best, kept sorted.
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (i, p) in train.iter().enumerate() {
        if p.vector.len() != query.len() {
            return Err(Error::DimensionMismatch {
                expected: query.len(),
                got: p.vector.len(),
            });
        }
        let d = squared_distance(&p.vector, query);
        if best.len() == k && d >= best[k - 1].0 {
            continue;
        }
        let at = best.partition_point(|&(bd, _)| bd <= d);
        best.insert(at, (d, i));
        best.truncate(k);
    }
    let words = best
        .iter()
        .filter(|&&(_, i)| train[i].label == Label::Word)
        .count();
    Ok(if 2 * words >= best.len() {
        Label::Word
    } else {
        Label::Nonword
    })
}

fn check_dim(hidden: &[f64], e: &Matrix) -> Result<()> {
    if hidden.len() != e.cols() {
        return Err(Error::DimensionMismatch {
            expected: e.cols(),
            got: hidden.len(),
        });
    }
    Ok(())
}

fn rank_by(scores: &[f64]) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = (0..scores.len() as TokenId).collect();
    ids.sort_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    ids
}

/// Dot-product scores of `hidden` against every row of `e`.
pub fn lens_scores(hidden: &[f64], e: &Matrix) -> Result<Vec<f64>> {
    check_dim(hidden, e)?;
    Ok((0..e.rows()).map(|i| dot(e.row(i), hidden)).collect())
}

/// Token ids ranked by descending `E·hidden`, ties by lower id.
pub fn logit_lens_input(hidden: &[f64], e: &Matrix) -> Result<Vec<TokenId>> {
    Ok(rank_by(&lens_scores(hidden, e)?))
}

/// Token ids ranked by descending cosine similarity, ties by lower id.
pub fn cosine_retrieval(hidden: &[f64], e: &Matrix) -> Result<Vec<TokenId>> {
    check_dim(hidden, e)?;
    let h = norm(hidden);
    if h == 0.0 {
        return Err(Error::ZeroVector);
    }
    let scores: Vec<f64> = (0..e.rows())
        .map(|i| {
            let r = e.row(i);
            let n = norm(r);
            if n == 0.0 {
                0.0
            } else {
                dot(r, hidden) / (n * h)
            }
        })
        .collect();
    Ok(rank_by(&scores))
}

/// The unique highest-scoring id, or `None` when the top score is shared.
pub fn strict_top1(scores: &[f64]) -> Option<TokenId> {
    let mut best = 0usize;
    let mut tied = false;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
            tied = false;
        } else if s == scores[best] {
            tied = true;
        }
    }
    (!scores.is_empty() && !tied).then_some(best as TokenId)
}

/// Logit-lens retrieval hit: `target` is the strict rank-1 token. A top score
/// shared by several tokens is a miss.
pub fn lens_hit(hidden: &[f64], e: &Matrix, target: TokenId) -> Result<bool> {
    Ok(strict_top1(&lens_scores(hidden, e)?) == Some(target))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalCurve {
    pub per_layer: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub n_items: usize,
}

impl RetrievalCurve {
    /// `layer,rate` rows for the per-layer rates.
    pub fn per_layer_csv(&self) -> String {
        series_csv("rate", &self.per_layer)
    }

    pub fn cumulative_csv(&self) -> String {
        series_csv("rate", &self.cumulative)
    }

    pub fn best_layer(&self) -> usize {
        crate::linalg::argmax(&self.per_layer)
    }
}

/// Two-column CSV of a per-layer series.
pub fn series_csv(value_name: &str, values: &[f64]) -> String {
    let mut out = format!("layer,{value_name}\n");
    for (l, v) in values.iter().enumerate() {
        let _ = writeln!(out, "{l},{v}");
    }
    out
}

/// Per-layer and cumulative hit rates from an items×layers hit matrix.
pub fn retrieval_curve(hits: &[Vec<bool>]) -> Result<RetrievalCurve> {
    let n_layers = hits.first().map(Vec::len).unwrap_or(0);
    if n_layers == 0 {
        return Err(Error::EmptyInput);
    }
    if let Some(bad) = hits.iter().find(|h| h.len() != n_layers) {
        return Err(Error::DimensionMismatch {
            expected: n_layers,
            got: bad.len(),
        });
    }
    let n = hits.len() as f64;
    let mut per_layer = vec![0.0; n_layers];
    let mut cumulative = vec![0.0; n_layers];
    for item in hits {
        let mut seen = false;
        for (l, &h) in item.iter().enumerate() {
            seen |= h;
            per_layer[l] += f64::from(u8::from(h));
            cumulative[l] += f64::from(u8::from(seen));
        }
    }
    per_layer.iter_mut().for_each(|v| *v /= n);
    cumulative.iter_mut().for_each(|v| *v /= n);
    Ok(RetrievalCurve {
        per_layer,
        cumulative,
        n_items: hits.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn pt(v: &[f64], label: Label) -> ProbePoint {
        ProbePoint {
            vector: v.to_vec(),
            label,
        }
    }

    /// Full sort of all distances, then vote.
    fn knn_oracle(train: &[ProbePoint], q: &[f64], k: usize) -> Label {
        let mut all: Vec<(f64, usize)> = train
            .iter()
            .enumerate()
            .map(|(i, p)| (squared_distance(&p.vector, q), i))
            .collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let k = k.min(train.len());
        let words = all[..k]
            .iter()
            .filter(|x| train[x.1].label == Label::Word)
            .count();
        if 2 * words >= k {
            Label::Word
        } else {
            Label::Nonword
        }
    }

    #[test]
    fn knn_fixture() {
        let mut train = vec![pt(&[0.0, 0.0], Label::Word); 3];
        train.extend(vec![pt(&[10.0, 10.0], Label::Nonword); 3]);
        assert_eq!(knn_classify(&train, &[1.0, 1.0], 4).unwrap(), Label::Word);
        let all_word = vec![pt(&[0.0], Label::Word); 5];
        assert_eq!(knn_classify(&all_word, &[99.0], 4).unwrap(), Label::Word);
        assert!(matches!(knn_classify(&[], &[0.0], 4), Err(Error::EmptyTrainSet)));
    }

    #[test]
    fn knn_vote_tie_goes_to_word() {
        let train = vec![
            pt(&[0.0], Label::Nonword),
            pt(&[0.0], Label::Nonword),
            pt(&[1.0], Label::Word),
            pt(&[1.0], Label::Word),
        ];
        assert_eq!(knn_classify(&train, &[0.4], 4).unwrap(), Label::Word);
    }

    #[test]
    fn knn_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let train: Vec<ProbePoint> = (0..200)
            .map(|_| {
                // Coarse grid so distance ties actually occur.
                let v = [rng.gen_range(0..10) as f64, rng.gen_range(0..10) as f64];
                let l = if rng.gen_bool(0.5) {
                    Label::Word
                } else {
                    Label::Nonword
                };
                pt(&v, l)
            })
            .collect();
        for k in [1, 2, 3, 4, 7] {
            for _ in 0..50 {
                let q = [rng.gen_range(-1.0..11.0), rng.gen_range(-1.0..11.0)];
                assert_eq!(knn_classify(&train, &q, k).unwrap(), knn_oracle(&train, &q, k));
            }
        }
    }

    #[test]
    fn separated_clusters_are_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut points = Vec::new();
        for i in 0..100 {
            let (label, center) = if i % 2 == 0 {
                (Label::Word, 0.0)
            } else {
                (Label::Nonword, 10.0)
            };
            let v: Vec<f64> = (0..8)
                .map(|_| center + rng.sample::<f64, _>(StandardNormal) * 0.1)
                .collect();
            points.push(ProbePoint { vector: v, label });
        }
        let ds = ProbeDataset::split(0, points, 1);
        assert_eq!(ds.train.len(), 80);
        assert_eq!(ds.eval.len(), 20);
        assert_eq!(ds.train.iter().filter(|p| p.label == Label::Word).count(), 40);
        assert_eq!(ds.eval_accuracy(DEFAULT_K).unwrap(), 1.0);
    }

    #[test]
    fn logit_lens_fixture() {
        let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(logit_lens_input(&[2.0, 1.0], &e).unwrap(), vec![0, 1, 2]);
        assert_eq!(logit_lens_input(&[0.0, 0.0], &e).unwrap(), vec![0, 1, 2]);
        assert!(!lens_hit(&[0.0, 0.0], &e, 0).unwrap());
        assert!(lens_hit(&[2.0, 1.0], &e, 0).unwrap());
        assert!(matches!(
            logit_lens_input(&[1.0], &e),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            cosine_retrieval(&[0.0, 0.0], &e),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn lens_and_cosine_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e = Matrix::randn(8, 4, 1.0, &mut rng);
        for _ in 0..20 {
            let h: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
            let mut best_dot = 0;
            let mut best_cos = 0;
            let cos = |i: usize| dot(e.row(i), &h) / (norm(e.row(i)) * norm(&h));
            for i in 1..8 {
                if dot(e.row(i), &h) > dot(e.row(best_dot), &h) {
                    best_dot = i;
                }
                if cos(i) > cos(best_cos) {
                    best_cos = i;
                }
            }
            assert_eq!(logit_lens_input(&h, &e).unwrap()[0] as usize, best_dot);
            assert_eq!(cosine_retrieval(&h, &e).unwrap()[0] as usize, best_cos);
            let t = rng.gen_range(0..8);
            assert_eq!(cosine_retrieval(e.row(t), &e).unwrap()[0] as usize, t);
        }
    }

    #[test]
    fn curve_fixtures() {
        let c = retrieval_curve(&[vec![false, true], vec![true, false]]).unwrap();
        assert_eq!(c.per_layer, vec![0.5, 0.5]);
        assert_eq!(c.cumulative, vec![0.5, 1.0]);
        let c = retrieval_curve(&[vec![false]]).unwrap();
        assert_eq!((c.per_layer, c.cumulative), (vec![0.0], vec![0.0]));
        let c = retrieval_curve(&vec![vec![true; 3]; 4]).unwrap();
        assert_eq!(c.cumulative, vec![1.0; 3]);
        assert!(matches!(retrieval_curve(&[]), Err(Error::EmptyInput)));
        assert_eq!(series_csv("rate", &[0.5, 1.0]), "layer,rate\n0,0.5\n1,1\n");
    }

    proptest! {
        #[test]
        fn cumulative_is_monotone(hits in prop::collection::vec(prop::collection::vec(any::<bool>(), 5), 1..30)) {
            let c = retrieval_curve(&hits).unwrap();
            for w in c.cumulative.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
            let max = c.per_layer.iter().cloned().fold(0.0, f64::max);
            prop_assert!(*c.cumulative.last().unwrap() >= max);
        }

        #[test]
        fn lens_and_cosine_agree_on_equal_norm_rows(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut e = Matrix::randn(12, 6, 1.0, &mut rng);
            for i in 0..12 {
                let n = norm(e.row(i));
                e.row_mut(i).iter_mut().for_each(|x| *x /= n);
            }
            let h: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
            prop_assert_eq!(logit_lens_input(&h, &e).unwrap()[0], cosine_retrieval(&h, &e).unwrap()[0]);
        }

        #[test]
        fn cosine_is_scale_invariant(seed in any::<u64>(), c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = Matrix::randn(10, 5, 1.0, &mut rng);
            let h: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
            let hs: Vec<f64> = h.iter().map(|x| x * c).collect();
            prop_assert_eq!(cosine_retrieval(&h, &e).unwrap()[0], cosine_retrieval(&hs, &e).unwrap()[0]);
        }
    }
}
