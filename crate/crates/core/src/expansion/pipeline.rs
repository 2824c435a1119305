use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::maps::{derive_initial_entries, learn_layer_maps, LayerMaps};
use crate::error::{Error, Result};
use crate::harness::CorpusIndex;
use crate::linalg::{argmax, gemm, Matrix};
use crate::model::{
    backward, clip_grad_norm, cross_entropy, forward, forward_cached, sample_batch, AdamW, GradScope, Model,
    ModelWeights, TrainHyper,
};
use crate::patchscope::{build_patch_prompt, earliest_decodable_layer, PatchMode, XXXX_TEMPLATE};
use crate::tokenizer::{TokenId, Vocabulary, WordRecord};

/// How initial entries are derived from an accepted word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Mapped detokenized representation.
    #[default]
    Derived,
    /// Mean of the word's original token rows.
    MeanEmbedding,
}

/// Refinement defaults: 500 steps over 128-token windows.
pub fn refine_defaults() -> TrainHyper {
    TrainHyper {
        steps: 500,
        seq_len: 128,
        lr: 1e-3,
        ..TrainHyper::default()
    }
}

fn default_min_count() -> usize {
    5
}

fn default_template() -> String {
    XXXX_TEMPLATE.to_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpandOptions {
    #[serde(default = "default_min_count")]
    pub min_count: usize,
    #[serde(default = "default_template")]
    pub template: String,
    #[serde(default)]
    pub patch_mode: PatchMode,
    #[serde(default)]
    pub init: InitMode,
    /// Token prepended to every single-token input when fitting the maps.
    #[serde(default)]
    pub map_prefix: Option<TokenId>,
    #[serde(default = "refine_defaults")]
    pub refine: TrainHyper,
}

impl Default for ExpandOptions {
    fn default() -> Self {
        Self {
            min_count: default_min_count(),
            template: default_template(),
            patch_mode: PatchMode::default(),
            init: InitMode::default(),
            map_prefix: None,
            refine: refine_defaults(),
        }
    }
}

/// One added vocabulary word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionEntry {
    pub word: String,
    pub original_ids: Vec<TokenId>,
    pub layer: usize,
    pub new_id: TokenId,
    #[serde(with = "super::b64")]
    pub r: Vec<f64>,
    #[serde(with = "super::b64")]
    pub e_hat: Vec<f64>,
    #[serde(with = "super::b64")]
    pub u_hat: Vec<f64>,
    #[serde(with = "super::b64")]
    pub e: Vec<f64>,
    #[serde(with = "super::b64")]
    pub u: Vec<f64>,
}

/// `W_E`, `W_U`, giving `e = ê + W_E ê` and `u = û + W_U û`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementMatrices {
    pub w_e: Matrix,
    pub w_u: Matrix,
}

impl RefinementMatrices {
    pub fn zeros(d: usize) -> Self {
        Self {
            w_e: Matrix::zeros(d, d),
            w_u: Matrix::zeros(d, d),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w_e.is_finite() && self.w_u.is_finite()
    }

    fn apply(w: &Matrix, v: &[f64]) -> Vec<f64> {
        let wv = w.matvec(v).expect("d-vector");
        v.iter().zip(wv).map(|(a, b)| a + b).collect()
    }

    pub fn refine(&self, e_hat: &[f64], u_hat: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (Self::apply(&self.w_e, e_hat), Self::apply(&self.w_u, u_hat))
    }
}

/// A base model with whole-word rows appended.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedModel {
    pub model: Model,
    pub vocab: Vocabulary,
    pub entries: Vec<ExpansionEntry>,
    pub refinement: RefinementMatrices,
}

impl ExpandedModel {
    /// Appends one row per entry, refined by `refinement`, and fills in each
    /// entry's `e`/`u`. Rows are stored at f32 precision.
    pub fn assemble(
        base: &Model,
        vocab: &Vocabulary,
        mut entries: Vec<ExpansionEntry>,
        refinement: RefinementMatrices,
    ) -> Result<Self> {
        if base.config.vocab_size != base.base_vocab || vocab.n_added() != 0 {
            return Err(Error::Config(
                "expansion needs an unexpanded model and vocabulary".into(),
            ));
        }
        if vocab.len() != base.config.vocab_size {
            return Err(Error::DimensionMismatch {
                expected: base.config.vocab_size,
                got: vocab.len(),
            });
        }
        let words: Vec<&str> = entries.iter().map(|e| e.word.as_str()).collect();
        let new_vocab = vocab.with_added_words(&words)?;
        let mut model = base.clone();
        for entry in &mut entries {
            let (e, u) = refinement.refine(&entry.e_hat, &entry.u_hat);
            entry.e = e.iter().map(|&x| x as f32 as f64).collect();
            entry.u = u.iter().map(|&x| x as f32 as f64).collect();
            let id = model.push_token(&entry.e, &entry.u)?;
            if id != entry.new_id {
                return Err(Error::Internal(format!(
                    "entry {} expected id {}, got {id}",
                    entry.word, entry.new_id
                )));
            }
        }
        Ok(Self {
            model,
            vocab: new_vocab,
            entries,
            refinement,
        })
    }
}

/// Loss curves from a refinement run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    /// Mean next-token loss per step.
    pub losses: Vec<f64>,
    /// Mean loss at positions whose target is a new token; `None` when a batch
    /// has no such position.
    pub new_word_losses: Vec<Option<f64>>,
}

/// Result of a full expansion run.
#[derive(Debug, Clone)]
pub struct ExpansionRun {
    pub expanded: ExpandedModel,
    pub n_candidates: usize,
    /// Candidates with no decodable layer.
    pub skipped: Vec<String>,
    pub refine: Option<RefineReport>,
}

/// Documents joined by newlines and encoded under `vocab`.
fn encode_stream<S: AsRef<str>>(vocab: &Vocabulary, docs: &[S]) -> Vec<TokenId> {
    CorpusIndex::from_documents(docs, vocab).stream(vocab)
}

/// Multi-token words appearing at least `min_count` times, in lexicographic order.
pub fn candidate_words<S: AsRef<str>>(vocab: &Vocabulary, docs: &[S], min_count: usize) -> Vec<String> {
    CorpusIndex::from_documents(docs, vocab)
        .word_freq
        .into_iter()
        .filter(|(w, c)| *c >= min_count && vocab.encode_word(w).len() >= 2)
        .map(|(w, _)| w)
        .collect()
}

fn mean_rows(m: &Matrix, ids: &[TokenId]) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for &id in ids {
        for (o, v) in out.iter_mut().zip(m.row(id as usize)) {
            *o += v / ids.len() as f64;
        }
    }
    out
}

/// Words that decode from some layer, with their initial entries. Each word is
/// read without context. Returns the accepted entries and the skipped words.
pub fn select_entries(
    model: &Model,
    vocab: &Vocabulary,
    words: &[String],
    maps: &LayerMaps,
    opts: &ExpandOptions,
) -> Result<(Vec<ExpansionEntry>, Vec<String>)> {
    let prompt = build_patch_prompt(vocab, &opts.template)?;
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for word in words {
        let ids = vocab.encode_word(word);
        let record = WordRecord::new(word.clone(), ids.clone(), Vec::new());
        let Some((layer, r)) = earliest_decodable_layer(model, vocab, &record, &prompt, opts.patch_mode)?
        else {
            skipped.push(word.clone());
            continue;
        };
        let (e_hat, u_hat) = match opts.init {
            InitMode::Derived => derive_initial_entries(&r, layer, maps)?,
            InitMode::MeanEmbedding => (
                mean_rows(&model.weights.embed, &ids),
                mean_rows(&model.weights.unembed, &ids),
            ),
        };
        entries.push(ExpansionEntry {
            word: word.clone(),
            original_ids: ids,
            layer,
            new_id: (model.config.vocab_size + entries.len()) as TokenId,
            r,
            e: e_hat.clone(),
            u: u_hat.clone(),
            e_hat,
            u_hat,
        });
    }
    Ok((entries, skipped))
}

/// Adds every decodable multi-token word of `test_docs` seen at least
/// `min_count` times, then refines the new rows on `train_docs`.
pub fn expand_vocabulary<S: AsRef<str>, T: AsRef<str>>(
    model: &Model,
    vocab: &Vocabulary,
    train_docs: &[S],
    test_docs: &[T],
    opts: &ExpandOptions,
) -> Result<ExpansionRun> {
    if opts.min_count == 0 {
        return Err(Error::Config("min_count must be at least 1".into()));
    }
    let words = candidate_words(vocab, test_docs, opts.min_count);
    if words.is_empty() {
        return Err(Error::NoCandidates {
            min_count: opts.min_count,
        });
    }
    let maps = learn_layer_maps(model, opts.map_prefix)?;
    let (entries, skipped) = select_entries(model, vocab, &words, &maps, opts)?;
    let d = model.d_model();
    let staged = ExpandedModel::assemble(model, vocab, entries, RefinementMatrices::zeros(d))?;
    if staged.entries.is_empty() {
        return Ok(ExpansionRun {
            expanded: staged,
            n_candidates: words.len(),
            skipped,
            refine: None,
        });
    }
    let (refinement, report) = train_refinement(&staged, train_docs, &opts.refine)?;
    let expanded = ExpandedModel::assemble(model, vocab, staged.entries, refinement)?;
    Ok(ExpansionRun {
        expanded,
        n_candidates: words.len(),
        skipped,
        refine: Some(report),
    })
}

fn set_new_rows(model: &mut Model, entries: &[ExpansionEntry], w: &RefinementMatrices) -> Result<()> {
    for entry in entries {
        let (e, u) = w.refine(&entry.e_hat, &entry.u_hat);
        model
            .weights
            .embed
            .row_mut(entry.new_id as usize)
            .copy_from_slice(&e);
        model
            .weights
            .unembed
            .row_mut(entry.new_id as usize)
            .copy_from_slice(&u);
    }
    Ok(())
}

/// Trains `W_E` and `W_U` by next-token cross-entropy on `train_docs`
/// re-encoded with the new words; every other parameter stays frozen.
pub fn train_refinement<S: AsRef<str>>(
    expanded: &ExpandedModel,
    train_docs: &[S],
    hyper: &TrainHyper,
) -> Result<(RefinementMatrices, RefineReport)> {
    if expanded.entries.is_empty() {
        return Err(Error::NoEligibleWords(
            "refinement needs at least one new word".into(),
        ));
    }
    let stream = encode_stream(&expanded.vocab, train_docs);
    if stream.len() < 2 {
        return Err(Error::EmptyCorpus);
    }
    if hyper.seq_len == 0 || hyper.batch_size == 0 || hyper.seq_len > expanded.model.config.max_seq {
        return Err(Error::Config(format!(
            "refinement seq_len {} and batch_size {} must be positive and seq_len ≤ max_seq {}",
            hyper.seq_len, hyper.batch_size, expanded.model.config.max_seq
        )));
    }
    let mut model = expanded.model.clone();
    let before = model.core_hash();
    let d = model.d_model();
    let v = model.config.vocab_size;
    let base = model.base_vocab;
    let m = expanded.entries.len();
    let mut e_hat = Vec::with_capacity(m * d);
    let mut u_hat = Vec::with_capacity(m * d);
    for entry in &expanded.entries {
        e_hat.extend_from_slice(&entry.e_hat);
        u_hat.extend_from_slice(&entry.u_hat);
    }
    let mut w = RefinementMatrices::zeros(d);
    let mut opt = AdamW::new(&[d * d, d * d]);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut report = RefineReport {
        losses: Vec::with_capacity(hyper.steps),
        new_word_losses: Vec::with_capacity(hyper.steps),
    };
    for step in 0..hyper.steps {
        set_new_rows(&mut model, &expanded.entries, &w)?;
        let batch = sample_batch(&stream, hyper.batch_size, hyper.seq_len, &mut rng);
        let n_targets: usize = batch.iter().map(|s| s.len() - 1).sum();
        let mut grads = ModelWeights::zeros(&model.config);
        let (mut loss, mut new_loss, mut n_new) = (0.0, 0.0, 0usize);
        for seq in &batch {
            let inputs = &seq[..seq.len() - 1];
            let targets: Vec<Option<TokenId>> = seq[1..].iter().map(|&t| Some(t)).collect();
            let cache = forward_cached(&model, inputs, &[])?;
            let frac = targets.len() as f64 / n_targets as f64;
            let (l, dlogits) = cross_entropy(&cache.logits, v, &targets, frac);
            loss += l * frac;
            let new_targets: Vec<Option<TokenId>> = targets
                .iter()
                .map(|t| t.filter(|&id| id as usize >= base))
                .collect();
            let k = new_targets.iter().flatten().count();
            if k > 0 {
                new_loss += cross_entropy(&cache.logits, v, &new_targets, 1.0).0 * k as f64;
                n_new += k;
            }
            backward(&model, &cache, &dlogits, &mut grads, GradScope::EmbeddingsOnly)?;
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        report.losses.push(loss);
        report
            .new_word_losses
            .push((n_new > 0).then(|| new_loss / n_new as f64));
        // dW = Σ_j g_j ĥ_jᵀ over the new rows.
        let mut g_we = vec![0.0; d * d];
        let mut g_wu = vec![0.0; d * d];
        let g_e = &grads.embed.as_slice()[base * d..];
        let g_u = &grads.unembed.as_slice()[base * d..];
        gemm(d, m, d, g_e, true, &e_hat, false, &mut g_we, false);
        gemm(d, m, d, g_u, true, &u_hat, false, &mut g_wu, false);
        clip_grad_norm(&mut [g_we.as_mut_slice(), g_wu.as_mut_slice()], hyper.grad_clip);
        let lr = hyper.lr_at(step);
        opt.step(
            vec![w.w_e.as_mut_slice(), w.w_u.as_mut_slice()],
            &[&g_we, &g_wu],
            &[false, false],
            lr,
            hyper,
        );
    }
    if !w.is_finite() {
        return Err(Error::NonFiniteLoss { step: hyper.steps });
    }
    if model.core_hash() != before {
        return Err(Error::Internal("refinement modified frozen parameters".into()));
    }
    Ok((w, report))
}

/// Token-level next-token accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Top1Metrics {
    pub all_words_acc: f64,
    /// Accuracy where the target is an added word; absent without added words.
    pub new_token_acc: Option<f64>,
    /// As `new_token_acc`, also accepting the word's original first token.
    pub original_or_new_acc: Option<f64>,
    pub n_positions: usize,
    pub n_new_positions: usize,
}

/// Greedy next-token accuracy over `docs` encoded with `vocab`. Documents
/// longer than the context window are scored in consecutive windows.
pub fn evaluate_top1<S: AsRef<str>>(model: &Model, vocab: &Vocabulary, docs: &[S]) -> Result<Top1Metrics> {
    let base = (vocab.n_added() > 0)
        .then(|| Vocabulary::from_merge_ids(vocab.merges().to_vec()))
        .transpose()?;
    let first_original = |id: TokenId| -> Result<Option<TokenId>> {
        match &base {
            Some(b) if vocab.is_added(id) => Ok(b.encode_chunk(vocab.token_bytes(id)?).first().copied()),
            _ => Ok(None),
        }
    };
    let window = model.config.max_seq;
    let (mut hits, mut n) = (0usize, 0usize);
    let (mut new_hits, mut either_hits, mut n_new) = (0usize, 0usize, 0usize);
    for doc in docs {
        let ids = vocab.encode(doc.as_ref()).ids;
        let mut start = 0;
        while start + 1 < ids.len() {
            let end = (start + window + 1).min(ids.len());
            let trace = forward(model, &ids[start..end - 1], &[])?;
            for p in start..end - 1 {
                let target = ids[p + 1];
                let pred = argmax(trace.logits.row(p - start)) as TokenId;
                n += 1;
                hits += (pred == target) as usize;
                if let Some(orig) = first_original(target)? {
                    n_new += 1;
                    new_hits += (pred == target) as usize;
                    either_hits += (pred == target || pred == orig) as usize;
                }
            }
            start = end - 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    let rate = |h: usize| (n_new > 0).then(|| h as f64 / n_new as f64);
    Ok(Top1Metrics {
        all_words_acc: hits as f64 / n as f64,
        new_token_acc: rate(new_hits),
        original_or_new_acc: rate(either_hits),
        n_positions: n,
        n_new_positions: n_new,
    })
}

/// Percentage drop in token count when `new_words` are added as whole-word
/// tokens.
pub fn token_reduction<S: AsRef<str>, W: AsRef<str>>(
    vocab: &Vocabulary,
    new_words: &[W],
    docs: &[S],
) -> Result<f64> {
    let expanded = vocab.with_added_words(new_words)?;
    let count = |v: &Vocabulary| docs.iter().map(|d| v.encode(d.as_ref()).len()).sum::<usize>();
    let before = count(vocab);
    if before == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(100.0 * (1.0 - count(&expanded) as f64 / before as f64))
}
