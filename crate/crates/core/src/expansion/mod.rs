//! Vocabulary expansion: map detokenized hidden states into the embedding
//! and unembedding spaces, append them as whole-word rows, and refine those
//! rows while the rest of the model stays frozen.

mod io;
mod maps;
mod pipeline;

pub use io::{load_expanded, read_entries, save_expanded, write_entries};
pub use maps::{
    derive_initial_entries, fit_procrustes, layer_maps_from_hiddens, learn_layer_maps, procrustes_objective,
    rms_normalize, single_token_hiddens, LayerMaps,
};
pub use pipeline::{
    candidate_words, evaluate_top1, expand_vocabulary, refine_defaults, select_entries, token_reduction,
    train_refinement, ExpandOptions, ExpandedModel, ExpansionEntry, ExpansionRun, InitMode, RefineReport,
    RefinementMatrices, Top1Metrics,
};

/// Serde adapter storing `Vec<f64>` as base64 of little-endian `f32`s.
mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let bytes: Vec<u8> = v.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = STANDARD.decode(s).map_err(D::Error::custom)?;
        if bytes.len() % 4 != 0 {
            return Err(D::Error::custom("vector length is not a multiple of 4 bytes"));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }
}
