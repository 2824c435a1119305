use super::{one_sided_t_test, ExperimentReport, Series};
use crate::error::{Error, Result};
use crate::model::{forward, ForwardTrace, Model};
use crate::tokenizer::WordRecord;

/// Per layer, the head-averaged attention from `position` to `position - 1`.
pub fn attention_to_previous(trace: &ForwardTrace, position: usize) -> Vec<f64> {
    (0..trace.n_layers())
        .map(|l| {
            (0..trace.n_heads)
                .map(|h| trace.attention(l, h, position, position - 1))
                .sum::<f64>()
                / trace.n_heads as f64
        })
        .collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Attention from a word's last token to the token before it, for words of
/// 2..=`max_word_tokens` tokens against single-token words (attending to
/// their preceding context token), with per-layer Welch t-tests.
pub fn attention_aggregation(
    model: &Model,
    words: &[WordRecord],
    max_word_tokens: usize,
) -> Result<ExperimentReport> {
    let n_layers = model.n_layers();
    let mut multi: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
    let mut single: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
    for w in words {
        let n = w.n_tokens();
        let group = if (2..=max_word_tokens).contains(&n) {
            &mut multi
        } else if n == 1 && !w.context_ids.is_empty() {
            &mut single
        } else {
            continue;
        };
        let mut w = w.clone();
        w.truncate_context(n, model.config.max_seq);
        let ids = w.input_ids();
        if ids.len() < 2 {
            continue;
        }
        let trace = forward(model, &ids, &[])?;
        for (l, a) in attention_to_previous(&trace, ids.len() - 1)
            .into_iter()
            .enumerate()
        {
            group[l].push(a);
        }
    }
    if multi.first().map_or(0, Vec::len) < 2 || single.first().map_or(0, Vec::len) < 2 {
        return Err(Error::NoEligibleWords(
            "attention aggregation needs at least two multi-token and two single-token words".into(),
        ));
    }
    let mut report = ExperimentReport::new("attention-aggregation");
    report.series.push(Series::grouped(
        "attention",
        "multi",
        multi.iter().map(|v| mean(v)).collect(),
    ));
    report.series.push(Series::grouped(
        "attention",
        "single",
        single.iter().map(|v| mean(v)).collect(),
    ));
    for l in 0..n_layers {
        let mut t = one_sided_t_test(&multi[l], &single[l])?;
        t.layer = l;
        report.stats.push(t);
    }
    report.scalars.insert("n_multi".into(), multi[0].len() as f64);
    report.scalars.insert("n_single".into(), single[0].len() as f64);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        Model::new(ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            d_ff: 32,
            vocab_size: 50,
            max_seq: 32,
            rope_base: 10_000.0,
            seed: 7,
        })
        .unwrap()
    }

    fn words(seed: u64) -> Vec<WordRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..20)
            .map(|i| {
                let n = if i % 2 == 0 { 1 } else { rng.gen_range(2..=4) };
                let ids = (0..n).map(|_| rng.gen_range(0..50)).collect();
                let ctx = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..50)).collect();
                WordRecord::new(format!("w{i}"), ids, ctx)
            })
            .collect()
    }

    #[test]
    fn means_match_independent_average() {
        let m = model();
        let ws = words(1);
        let r = attention_aggregation(&m, &ws, 4).unwrap();
        let mut sums = [[0.0f64; 2]; 2];
        let mut counts = [0.0f64; 2];
        for w in &ws {
            let g = usize::from(w.n_tokens() == 1);
            let ids = w.input_ids();
            let tr = forward(&m, &ids, &[]).unwrap();
            let p = ids.len() - 1;
            counts[g] += 1.0;
            for (l, sum) in sums[g].iter_mut().enumerate() {
                let mut head_total = 0.0;
                for h in 0..4 {
                    head_total += tr.attn_weights[l][(h * ids.len() + p) * ids.len() + p - 1];
                }
                *sum += head_total / 4.0;
            }
        }
        for (g, name) in ["multi", "single"].iter().enumerate() {
            let got = &r.grouped("attention", name).unwrap().values;
            for l in 0..2 {
                assert!((got[l] - sums[g][l] / counts[g]).abs() <= 1e-6);
                assert!((0.0..=1.0).contains(&got[l]));
            }
        }
        assert_eq!(r.stats.len(), 2);
        for s in &r.stats {
            assert!((s.p_greater + s.p_less - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn uniform_attention_gives_equal_groups() {
        let mut m = model();
        // Zero queries make every score 0, so attention is uniform over the prefix.
        for l in &mut m.weights.layers {
            l.wq.as_mut_slice().iter_mut().for_each(|x| *x = 0.0);
        }
        // Equal-length inputs so uniform weights coincide across groups.
        let ws: Vec<WordRecord> = (0..10)
            .map(|i| {
                if i % 2 == 0 {
                    WordRecord::new("a", vec![3], vec![1, 2, 4])
                } else {
                    WordRecord::new("bc", vec![5, 6], vec![1, 2])
                }
            })
            .collect();
        let r = attention_aggregation(&m, &ws, 4).unwrap();
        assert_eq!(
            r.grouped("attention", "multi"),
            r.grouped("attention", "single")
                .map(|s| {
                    let mut s = s.clone();
                    s.group = Some("multi".into());
                    s
                })
                .as_ref()
        );
        for s in &r.stats {
            assert_eq!((s.p_greater, s.p_less), (0.5, 0.5));
        }
    }

    #[test]
    fn needs_both_groups() {
        let ws: Vec<WordRecord> = words(2).into_iter().filter(|w| w.n_tokens() == 1).collect();
        assert!(matches!(
            attention_aggregation(&model(), &ws, 4),
            Err(Error::NoEligibleWords(_))
        ));
    }
}
