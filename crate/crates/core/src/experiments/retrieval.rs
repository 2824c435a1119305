use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ExperimentReport;
use crate::error::{Error, Result};
use crate::model::{forward, ForwardTrace, Intervention, Model};
use crate::patchscope::{decode_sweep, PatchMode, PatchPrompt};
use crate::probes::{lens_hit, retrieval_curve};
use crate::tokenizer::perturb::{split_with, MAX_PIECES, SPLIT_MIN_CHARS, TYPO_MIN_CHARS};
use crate::tokenizer::{perturb_typo, random_typo, TokenId, Vocabulary, WordRecord};

pub const DEFAULT_SUFFIXES: [&str; 3] = ["ing", "ion", "est"];
const TYPO_ATTEMPTS: usize = 100;
const MIN_ROOT_CHARS: usize = 2;

/// How a single-token word is turned into several tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Random cut into 2–5 pieces.
    Artificial,
    /// One random typo, resampled until the result is multi-token.
    Typo,
    /// Root plus one of the configured suffixes.
    Suffix,
}

/// A word that was a single token, re-expressed as several tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitItem {
    pub word: String,
    pub word_id: TokenId,
    pub context_ids: Vec<TokenId>,
    pub piece_ids: Vec<TokenId>,
}

impl SplitItem {
    pub fn input_ids(&self) -> Vec<TokenId> {
        let mut ids = self.context_ids.clone();
        ids.extend_from_slice(&self.piece_ids);
        ids
    }

    pub fn last(&self) -> usize {
        self.context_ids.len() + self.piece_ids.len() - 1
    }
}

/// The word's single token id if it is stored whole with the boundary marker.
fn whole_word_id(vocab: &Vocabulary, record: &WordRecord) -> Option<TokenId> {
    let [id] = record.token_ids[..] else { return None };
    let bytes = vocab.token_bytes(id).ok()?;
    (bytes.first() == Some(&b' ') && &bytes[1..] == record.surface.as_bytes()).then_some(id)
}

fn suffix_split<'a>(word: &'a str, suffixes: &[&str]) -> Option<[&'a str; 2]> {
    suffixes.iter().find_map(|s| {
        let root = word.strip_suffix(s)?;
        (root.chars().count() >= MIN_ROOT_CHARS).then(|| [root, &word[root.len()..]])
    })
}

/// Builds the split form of one eligible word, or `None` when the word does
/// not qualify for `mode`.
pub fn make_split_item<R: Rng>(
    vocab: &Vocabulary,
    record: &WordRecord,
    mode: SplitMode,
    suffixes: &[&str],
    max_seq: usize,
    rng: &mut R,
) -> Result<Option<SplitItem>> {
    let Some(word_id) = whole_word_id(vocab, record) else {
        return Ok(None);
    };
    let word = record.surface.as_str();
    let n_chars = word.chars().count();
    let piece_ids = match mode {
        SplitMode::Artificial => {
            if n_chars <= SPLIT_MIN_CHARS {
                return Ok(None);
            }
            let n = rng.gen_range(2..=MAX_PIECES.min(n_chars));
            vocab.encode_pieces(&split_with(word, n, rng)?, true)
        }
        SplitMode::Typo => {
            if n_chars <= TYPO_MIN_CHARS {
                return Ok(None);
            }
            let mut found = None;
            for _ in 0..TYPO_ATTEMPTS {
                let op = random_typo(word, rng)?;
                let ids = vocab.encode_word(&perturb_typo(word, op)?);
                if ids.len() >= 2 {
                    found = Some(ids);
                    break;
                }
            }
            match found {
                Some(ids) => ids,
                None => return Ok(None),
            }
        }
        SplitMode::Suffix => {
            if n_chars <= SPLIT_MIN_CHARS {
                return Ok(None);
            }
            match suffix_split(word, suffixes) {
                Some(pieces) => vocab.encode_pieces(&pieces, true),
                None => return Ok(None),
            }
        }
    };
    let mut context_ids = record.context_ids.clone();
    let keep = max_seq.saturating_sub(piece_ids.len());
    if context_ids.len() > keep {
        context_ids.drain(..context_ids.len() - keep);
    }
    Ok(Some(SplitItem {
        word: word.to_owned(),
        word_id,
        context_ids,
        piece_ids,
    }))
}

fn split_items(
    model: &Model,
    vocab: &Vocabulary,
    words: &[WordRecord],
    mode: SplitMode,
    seed: u64,
) -> Result<Vec<SplitItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    for w in words {
        if let Some(item) =
            make_split_item(vocab, w, mode, &DEFAULT_SUFFIXES, model.config.max_seq, &mut rng)?
        {
            items.push(item);
        }
    }
    if items.is_empty() {
        return Err(Error::NoEligibleWords(format!(
            "no word qualifies for {mode:?} splitting"
        )));
    }
    Ok(items)
}

fn hidden_hits(model: &Model, trace: &ForwardTrace, item: &SplitItem) -> Result<Vec<bool>> {
    let e = &model.weights.embed;
    (0..=model.n_layers())
        .map(|l| lens_hit(trace.hidden_at(l, item.last()), e, item.word_id))
        .collect()
}

fn ffn_hits(model: &Model, trace: &ForwardTrace, item: &SplitItem) -> Result<Vec<bool>> {
    let e = &model.weights.embed;
    (0..model.n_layers())
        .map(|l| lens_hit(trace.ffn_at(l, item.last()), e, item.word_id))
        .collect()
}

/// Logit-lens retrieval of split single-token words from the last piece's
/// hidden state at every layer.
pub fn split_retrieval(
    model: &Model,
    vocab: &Vocabulary,
    words: &[WordRecord],
    mode: SplitMode,
    seed: u64,
) -> Result<ExperimentReport> {
    let items = split_items(model, vocab, words, mode, seed)?;
    let mut hits = Vec::with_capacity(items.len());
    for item in &items {
        let trace = forward(model, &item.input_ids(), &[])?;
        hits.push(hidden_hits(model, &trace, item)?);
    }
    let mut report = ExperimentReport::new("split-retrieval");
    report.push_curve("", &retrieval_curve(&hits)?);
    report.scalars.insert("n_items".into(), items.len() as f64);
    Ok(report)
}

/// Retrieval from FFN updates, reported next to the hidden-state curves.
pub fn ffn_retrieval(
    model: &Model,
    vocab: &Vocabulary,
    words: &[WordRecord],
    mode: SplitMode,
    seed: u64,
) -> Result<ExperimentReport> {
    let items = split_items(model, vocab, words, mode, seed)?;
    let mut hidden = Vec::with_capacity(items.len());
    let mut ffn = Vec::with_capacity(items.len());
    for item in &items {
        let trace = forward(model, &item.input_ids(), &[])?;
        hidden.push(hidden_hits(model, &trace, item)?);
        ffn.push(ffn_hits(model, &trace, item)?);
    }
    let mut report = ExperimentReport::new("ffn-retrieval");
    report.push_curve("hidden", &retrieval_curve(&hidden)?);
    report.push_curve("ffn", &retrieval_curve(&ffn)?);
    report.scalars.insert("n_items".into(), items.len() as f64);
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationPolicy {
    /// Layers whose FFN update alone retrieves the word.
    Targeted,
    /// As many layers as `Targeted` would pick, drawn uniformly.
    Random,
    None,
}

/// Layers whose FFN update at the last piece gets ablated under `policy`.
pub fn plan_ablation<R: Rng>(
    model: &Model,
    trace: &ForwardTrace,
    item: &SplitItem,
    policy: AblationPolicy,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let targeted = || -> Result<Vec<usize>> {
        Ok(ffn_hits(model, trace, item)?
            .iter()
            .enumerate()
            .filter_map(|(l, &h)| h.then_some(l))
            .collect())
    };
    Ok(match policy {
        AblationPolicy::None => Vec::new(),
        AblationPolicy::Targeted => targeted()?,
        AblationPolicy::Random => {
            let count = targeted()?.len();
            let mut layers = sample(rng, model.n_layers(), count).into_vec();
            layers.sort_unstable();
            layers
        }
    })
}

/// Suffix-split retrieval with FFN updates ablated at the last piece.
///
/// With [`AblationPolicy::None`] the curves equal those of
/// [`split_retrieval`] in [`SplitMode::Suffix`].
pub fn ffn_ablation(
    model: &Model,
    vocab: &Vocabulary,
    words: &[WordRecord],
    policy: AblationPolicy,
    seed: u64,
) -> Result<ExperimentReport> {
    let items = split_items(model, vocab, words, SplitMode::Suffix, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = Vec::with_capacity(items.len());
    let mut n_ablated = 0usize;
    for item in &items {
        let ids = item.input_ids();
        let trace = forward(model, &ids, &[])?;
        let layers = plan_ablation(model, &trace, item, policy, &mut rng)?;
        n_ablated += layers.len();
        if layers.is_empty() {
            hits.push(hidden_hits(model, &trace, item)?);
        } else {
            let ivs: Vec<Intervention> = layers
                .iter()
                .map(|&layer| Intervention::AblateFfn {
                    layer,
                    position: item.last(),
                })
                .collect();
            let ablated = forward(model, &ids, &ivs)?;
            hits.push(hidden_hits(model, &ablated, item)?);
        }
    }
    let mut report = ExperimentReport::new("ffn-ablation");
    report.push_curve("", &retrieval_curve(&hits)?);
    report.scalars.insert("n_items".into(), items.len() as f64);
    if policy != AblationPolicy::None {
        report.scalars.insert(
            "mean_ablated_layers".into(),
            n_ablated as f64 / items.len() as f64,
        );
    }
    Ok(report)
}

/// Patching-based retrieval over every layer for the given words, without
/// any eligibility filter.
pub fn patchscope_retrieval(
    model: &Model,
    vocab: &Vocabulary,
    words: &[WordRecord],
    prompt: &PatchPrompt,
    mode: PatchMode,
) -> Result<ExperimentReport> {
    if words.is_empty() {
        return Err(Error::NoEligibleWords("no words to decode".into()));
    }
    let room = model.config.max_seq.saturating_sub(prompt.token_ids.len());
    let mut hits = Vec::with_capacity(words.len());
    for w in words {
        let mut w = w.clone();
        w.truncate_context(w.n_tokens(), model.config.max_seq);
        if w.n_tokens() > room {
            return Err(Error::SequenceTooLong {
                len: prompt.token_ids.len() + w.n_tokens(),
                max: model.config.max_seq,
            });
        }
        hits.push(
            decode_sweep(model, vocab, &w, prompt, mode)?
                .iter()
                .map(|r| r.success)
                .collect::<Vec<bool>>(),
        );
    }
    let curve = retrieval_curve(&hits)?;
    let mut report = ExperimentReport::new("multi-token-retrieval");
    report.scalars.insert(
        "never_decoded".into(),
        1.0 - curve.cumulative.last().copied().unwrap_or(0.0),
    );
    report.scalars.insert("n_items".into(), words.len() as f64);
    report.push_curve("", &curve);
    Ok(report)
}

/// Patching-based retrieval of words the tokenizer splits into several tokens.
pub fn multi_token_retrieval(
    model: &Model,
    vocab: &Vocabulary,
    words: &[WordRecord],
    prompt: &PatchPrompt,
    mode: PatchMode,
) -> Result<ExperimentReport> {
    let multi: Vec<WordRecord> = words.iter().filter(|w| w.n_tokens() >= 2).cloned().collect();
    if multi.is_empty() {
        return Err(Error::NoEligibleWords("no multi-token words".into()));
    }
    patchscope_retrieval(model, vocab, &multi, prompt, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelWeights};
    use crate::patchscope::{build_patch_prompt, XXXX_TEMPLATE};

    fn fixture() -> (Model, Vocabulary, Vec<WordRecord>) {
        let words = ["eating", "bluest", "motion", "zebra", "walking", "cat"];
        let vocab = Vocabulary::bytes_only().with_added_words(&words).unwrap();
        let model = Model::new(ModelConfig {
            d_model: 16,
            n_layers: 3,
            n_heads: 2,
            d_ff: 32,
            vocab_size: vocab.len(),
            max_seq: 32,
            rope_base: 10_000.0,
            seed: 6,
        })
        .unwrap();
        let ctx = vocab.encode("the").ids;
        let records = words
            .iter()
            .map(|w| WordRecord::new(*w, vocab.encode_word(w), ctx.clone()))
            .collect();
        (model, vocab, records)
    }

    #[test]
    fn eligibility_by_mode() {
        let (m, v, words) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut count = |mode| {
            words
                .iter()
                .filter(|w| {
                    make_split_item(&v, w, mode, &DEFAULT_SUFFIXES, m.config.max_seq, &mut rng)
                        .unwrap()
                        .is_some()
                })
                .count()
        };
        assert_eq!(count(SplitMode::Artificial), 5);
        assert_eq!(count(SplitMode::Suffix), 4);
        assert_eq!(count(SplitMode::Typo), 5);
        let item = make_split_item(&v, &words[0], SplitMode::Suffix, &DEFAULT_SUFFIXES, 32, &mut rng)
            .unwrap()
            .unwrap();
        assert_eq!(v.decode_lossy(&item.piece_ids).unwrap(), " eating");
        assert_eq!(item.piece_ids.len(), 7);
        assert!(matches!(
            split_retrieval(&m, &v, &words[5..], SplitMode::Artificial, 0),
            Err(Error::NoEligibleWords(_))
        ));
    }

    #[test]
    fn curves_match_trace_recomputation() {
        let (m, v, words) = fixture();
        let report = ffn_retrieval(&m, &v, &words, SplitMode::Artificial, 3).unwrap();
        let items = split_items(&m, &v, &words, SplitMode::Artificial, 3).unwrap();
        let mut hidden = [0.0; 4];
        let mut ffn = [0.0; 3];
        for it in &items {
            let tr = forward(&m, &it.input_ids(), &[]).unwrap();
            for l in 0..4 {
                let scores: Vec<f64> = (0..v.len())
                    .map(|t| crate::linalg::dot(m.weights.embed.row(t), tr.hidden_at(l, it.last())))
                    .collect();
                let best = crate::linalg::argmax(&scores);
                let unique = scores.iter().filter(|&&s| s == scores[best]).count() == 1;
                if unique && best as u32 == it.word_id {
                    hidden[l] += 1.0 / items.len() as f64;
                }
                if l < 3 {
                    let fs: Vec<f64> = (0..v.len())
                        .map(|t| crate::linalg::dot(m.weights.embed.row(t), tr.ffn_at(l, it.last())))
                        .collect();
                    let b = crate::linalg::argmax(&fs);
                    if b as u32 == it.word_id && fs.iter().filter(|&&s| s == fs[b]).count() == 1 {
                        ffn[l] += 1.0 / items.len() as f64;
                    }
                }
            }
        }
        let got_h = &report.series("hidden_per_layer").unwrap().values;
        let got_f = &report.series("ffn_per_layer").unwrap().values;
        for l in 0..4 {
            assert!((got_h[l] - hidden[l]).abs() < 1e-12);
        }
        for l in 0..3 {
            assert!((got_f[l] - ffn[l]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_ffn_never_retrieves() {
        let (mut m, v, words) = fixture();
        let zeros = ModelWeights::zeros(&m.config);
        for (l, z) in m.weights.layers.iter_mut().zip(zeros.layers) {
            l.w_down = z.w_down;
        }
        let r = ffn_retrieval(&m, &v, &words, SplitMode::Artificial, 1).unwrap();
        assert!(r
            .series("ffn_per_layer")
            .unwrap()
            .values
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn no_ablation_equals_suffix_retrieval() {
        let (m, v, words) = fixture();
        let a = ffn_ablation(&m, &v, &words, AblationPolicy::None, 5).unwrap();
        let b = split_retrieval(&m, &v, &words, SplitMode::Suffix, 5).unwrap();
        assert_eq!(a.series, b.series);
        assert_eq!(a.scalars, b.scalars);
    }

    #[test]
    fn random_policy_matches_targeted_count() {
        let (mut m, v, words) = fixture();
        // Make FFN updates echo the input so some layers retrieve the word.
        for l in &mut m.weights.layers {
            l.w_down.as_mut_slice().iter_mut().for_each(|x| *x *= 30.0);
        }
        let items = split_items(&m, &v, &words, SplitMode::Suffix, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for it in &items {
            let tr = forward(&m, &it.input_ids(), &[]).unwrap();
            let t = plan_ablation(&m, &tr, it, AblationPolicy::Targeted, &mut rng).unwrap();
            let r = plan_ablation(&m, &tr, it, AblationPolicy::Random, &mut rng).unwrap();
            let recount = (0..3)
                .filter(|&l| lens_hit(tr.ffn_at(l, it.last()), &m.weights.embed, it.word_id).unwrap())
                .count();
            assert_eq!(t.len(), recount);
            assert_eq!(r.len(), recount);
            assert!(r.iter().all(|&l| l < 3));
        }
    }

    #[test]
    fn untrained_model_never_decodes() {
        let (m, v, _) = fixture();
        let p = build_patch_prompt(&v, XXXX_TEMPLATE).unwrap();
        let words: Vec<WordRecord> = ["zebra", "motion"]
            .iter()
            .map(|w| WordRecord::new(*w, Vocabulary::bytes_only().encode_word(w), vec![]))
            .collect();
        let r = multi_token_retrieval(&m, &v, &words, &p, PatchMode::Input).unwrap();
        assert_eq!(r.scalars["never_decoded"], 1.0);
        assert_eq!(r.series("per_layer").unwrap().values.len(), 4);
    }
}
