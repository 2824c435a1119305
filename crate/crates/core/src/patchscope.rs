//! Decoding hidden states by patching them into a carrier prompt and reading
//! the model's greedy continuation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, generate, Intervention, Model};
use crate::tokenizer::{TokenId, Vocabulary, WordRecord};

pub const PLACEHOLDER: &str = "{X}";
pub const REPEAT_TEMPLATE: &str = "Repeat this word twice: 1) {X} 2)";
pub const XXXX_TEMPLATE: &str = "x x x x";
/// Byte token that stands in for the patched vector.
pub const FILLER: TokenId = b'x' as TokenId;

/// A rendered carrier prompt and the positions that receive the patch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPrompt {
    pub template: String,
    pub token_ids: Vec<TokenId>,
    pub patch_positions: Vec<usize>,
}

impl PatchPrompt {
    /// The prompt with `ids` spliced in place of each placeholder position.
    pub fn with_tokens(&self, ids: &[TokenId]) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.token_ids.len() + ids.len());
        for (p, &t) in self.token_ids.iter().enumerate() {
            if self.patch_positions.contains(&p) {
                out.extend_from_slice(ids);
            } else {
                out.push(t);
            }
        }
        out
    }
}

/// Where the patched vector enters the carrier run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMode {
    /// Always at layer 0, in place of the input embedding.
    #[default]
    Input,
    /// At the same layer the vector was read from.
    Matched,
}

impl PatchMode {
    pub fn patch_layer(self, source_layer: usize) -> usize {
        match self {
            PatchMode::Input => 0,
            PatchMode::Matched => source_layer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub layer: usize,
    pub generated: String,
    pub success: bool,
    pub target: String,
}

fn is_all_placeholder(template: &str) -> bool {
    let mut parts = template.split(' ');
    parts.clone().next().is_some() && parts.all(|p| p == "x")
}

/// Renders a template with one `{X}` marker, or an all-`x` template such as
/// `"x x x x"` where every position is a placeholder.
pub fn build_patch_prompt(vocab: &Vocabulary, template: &str) -> Result<PatchPrompt> {
    let n_markers = template.matches(PLACEHOLDER).count();
    let (token_ids, patch_positions) = if n_markers == 1 {
        let at = template.find(PLACEHOLDER).expect("counted");
        let prefix = template[..at].trim_end();
        let suffix = &template[at + PLACEHOLDER.len()..];
        let mut ids = vocab.encode(prefix).ids;
        let pos = ids.len();
        ids.push(FILLER);
        ids.extend(vocab.encode(suffix).ids);
        (ids, vec![pos])
    } else if n_markers == 0 && is_all_placeholder(template) {
        let n = template.split(' ').count();
        (vec![FILLER; n], (0..n).collect())
    } else {
        return Err(Error::BadTemplate(format!(
            "expected one {PLACEHOLDER} marker or an all-x template, got {template:?}"
        )));
    };
    Ok(PatchPrompt {
        template: template.to_owned(),
        token_ids,
        patch_positions,
    })
}

fn normalize(s: &str) -> &str {
    s.trim()
}

fn target_len(vocab: &Vocabulary, target: &str) -> Result<usize> {
    let target = normalize(target);
    if target.is_empty() {
        return Err(Error::BadTarget);
    }
    Ok(vocab.encode_word(target).len())
}

/// Decodes `r` with a layer-0 patch at every placeholder position.
pub fn patchscope_decode(
    model: &Model,
    vocab: &Vocabulary,
    prompt: &PatchPrompt,
    r: &[f64],
    target: &str,
    max_new: usize,
) -> Result<DecodeResult> {
    patchscope_decode_at(model, vocab, prompt, r, target, max_new, 0)
}

/// Like [`patchscope_decode`] with the patch entering before `patch_layer`.
///
/// Success means the first `n` generated tokens, where `n` is the target's
/// token count, decode to the target after trimming whitespace.
pub fn patchscope_decode_at(
    model: &Model,
    vocab: &Vocabulary,
    prompt: &PatchPrompt,
    r: &[f64],
    target: &str,
    max_new: usize,
    patch_layer: usize,
) -> Result<DecodeResult> {
    let n = target_len(vocab, target)?;
    let ivs: Vec<Intervention> = prompt
        .patch_positions
        .iter()
        .map(|&position| Intervention::PatchHidden {
            layer: patch_layer,
            position,
            vector: r.to_vec(),
        })
        .collect();
    let out = generate(model, &prompt.token_ids, max_new, &ivs)?;
    let new = &out[prompt.token_ids.len()..];
    let generated = vocab.decode_lossy(new)?;
    let success = new.len() >= n && normalize(&vocab.decode_lossy(&new[..n])?) == normalize(target);
    Ok(DecodeResult {
        layer: patch_layer,
        generated,
        success,
        target: target.to_owned(),
    })
}

/// Hidden states of the word's last token at every layer, with its context.
pub fn last_token_hiddens(model: &Model, word: &WordRecord) -> Result<Vec<Vec<f64>>> {
    let ids = word.input_ids();
    let trace = forward(model, &ids, &[])?;
    let last = ids.len() - 1;
    Ok((0..=model.n_layers())
        .map(|l| trace.hidden_at(l, last).to_vec())
        .collect())
}

/// Decode outcome for every layer of the word's last-token hidden state.
pub fn decode_sweep(
    model: &Model,
    vocab: &Vocabulary,
    word: &WordRecord,
    prompt: &PatchPrompt,
    mode: PatchMode,
) -> Result<Vec<DecodeResult>> {
    let n = target_len(vocab, &word.surface)?;
    last_token_hiddens(model, word)?
        .iter()
        .enumerate()
        .map(|(l, r)| {
            let mut res =
                patchscope_decode_at(model, vocab, prompt, r, &word.surface, n, mode.patch_layer(l))?;
            res.layer = l;
            Ok(res)
        })
        .collect()
}

/// The first layer whose last-token hidden state decodes to the word, with
/// that hidden state. `None` when no layer succeeds.
pub fn earliest_decodable_layer(
    model: &Model,
    vocab: &Vocabulary,
    word: &WordRecord,
    prompt: &PatchPrompt,
    mode: PatchMode,
) -> Result<Option<(usize, Vec<f64>)>> {
    let n = target_len(vocab, &word.surface)?;
    for (l, r) in last_token_hiddens(model, word)?.into_iter().enumerate() {
        let res = patchscope_decode_at(model, vocab, prompt, &r, &word.surface, n, mode.patch_layer(l))?;
        if res.success {
            return Ok(Some((l, r)));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, ModelConfig};

    fn setup() -> (Model, Vocabulary) {
        let vocab = Vocabulary::bytes_only();
        let model = Model::new(ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            vocab_size: vocab.len(),
            max_seq: 64,
            rope_base: 10_000.0,
            seed: 3,
        })
        .unwrap();
        (model, vocab)
    }

    #[test]
    fn templates() {
        let v = Vocabulary::bytes_only();
        let p = build_patch_prompt(&v, REPEAT_TEMPLATE).unwrap();
        assert_eq!(p.patch_positions.len(), 1);
        let at = p.patch_positions[0];
        assert_eq!(p.token_ids[at], FILLER);
        assert_eq!(
            v.decode_lossy(&p.token_ids[..at]).unwrap(),
            "Repeat this word twice: 1)"
        );
        assert_eq!(v.decode_lossy(&p.token_ids[at + 1..]).unwrap(), " 2)");
        let x = build_patch_prompt(&v, XXXX_TEMPLATE).unwrap();
        assert_eq!(x.patch_positions, vec![0, 1, 2, 3]);
        for bad in ["no marker", "{X} and {X}", "", "x  x"] {
            assert!(
                matches!(build_patch_prompt(&v, bad), Err(Error::BadTemplate(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn identity_patch_matches_direct_run() {
        let (m, v) = setup();
        let p = build_patch_prompt(&v, REPEAT_TEMPLATE).unwrap();
        for t in [b'a' as u32, b'Q' as u32, 200] {
            let direct = p.with_tokens(&[t]);
            let ivs = [Intervention::PatchHidden {
                layer: 0,
                position: p.patch_positions[0],
                vector: m.embedding(t).to_vec(),
            }];
            let a = forward(&m, &direct, &[]).unwrap();
            let b = forward(&m, &p.token_ids, &ivs).unwrap();
            assert_eq!(a.logits, b.logits);
        }
    }

    #[test]
    fn empty_target_is_rejected() {
        let (m, v) = setup();
        let p = build_patch_prompt(&v, REPEAT_TEMPLATE).unwrap();
        let r = vec![0.0; 16];
        assert!(matches!(
            patchscope_decode(&m, &v, &p, &r, "", 0),
            Err(Error::BadTarget)
        ));
        assert!(matches!(
            patchscope_decode(&m, &v, &p, &r, "  ", 3),
            Err(Error::BadTarget)
        ));
    }

    #[test]
    fn untrained_model_decodes_nothing() {
        let (m, v) = setup();
        let p = build_patch_prompt(&v, XXXX_TEMPLATE).unwrap();
        let ids = v.encode_word("zebra");
        let w = WordRecord::new("zebra", ids, vec![]);
        assert_eq!(
            earliest_decodable_layer(&m, &v, &w, &p, PatchMode::Input).unwrap(),
            None
        );
        let sweep = decode_sweep(&m, &v, &w, &p, PatchMode::Matched).unwrap();
        assert_eq!(sweep.len(), 3);
        assert!(sweep.iter().all(|r| !r.success));
    }
}
