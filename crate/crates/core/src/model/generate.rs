use super::forward::forward_cached;
use super::{Intervention, Model};
use crate::error::{Error, Result};
use crate::linalg::argmax;
use crate::tokenizer::TokenId;

/// Greedy decoding. Returns the prompt followed by `max_new` generated ids.
///
/// Interventions keep their absolute positions and are re-applied on every
/// step.
pub fn generate(
    model: &Model,
    prompt: &[TokenId],
    max_new: usize,
    interventions: &[Intervention],
) -> Result<Vec<TokenId>> {
    if prompt.len() + max_new > model.config.max_seq {
        return Err(Error::SequenceTooLong {
            len: prompt.len() + max_new,
            max: model.config.max_seq,
        });
    }
    let mut ids = prompt.to_vec();
    for _ in 0..max_new {
        let cache = forward_cached(model, &ids, interventions)?;
        let next = argmax(cache.logits_at(ids.len() - 1));
        ids.push(next as TokenId);
    }
    Ok(ids)
}
