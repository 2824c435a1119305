use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::pipeline::{ExpandedModel, ExpansionEntry, RefinementMatrices};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint};
use crate::tokenizer::Vocabulary;

pub const MODEL_FILE: &str = "model.ckpt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const ENTRIES_FILE: &str = "entries.jsonl";
pub const REFINEMENT_FILE: &str = "refinement.json";

/// One JSON object per line.
pub fn write_entries<W: Write>(entries: &[ExpansionEntry], mut w: W) -> Result<()> {
    for e in entries {
        let line = serde_json::to_string(e).map_err(|err| Error::Internal(err.to_string()))?;
        writeln!(w, "{line}").map_err(|err| Error::io("<entries>", err))?;
    }
    Ok(())
}

pub fn read_entries(path: &Path) -> Result<Vec<ExpansionEntry>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format("expansion entry", format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

/// Writes the expanded checkpoint, vocabulary, entries and refinement
/// matrices into `dir`.
pub fn save_expanded(expanded: &ExpandedModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_checkpoint(&expanded.model, &dir.join(MODEL_FILE))?;
    expanded.vocab.save(dir.join(VOCAB_FILE))?;
    let path = dir.join(ENTRIES_FILE);
    let mut buf = Vec::new();
    write_entries(&expanded.entries, &mut buf)?;
    std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(REFINEMENT_FILE);
    let json = serde_json::to_string(&expanded.refinement).map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_expanded(dir: &Path) -> Result<ExpandedModel> {
    let model = load_checkpoint(&dir.join(MODEL_FILE))?;
    let vocab = Vocabulary::load(dir.join(VOCAB_FILE))?;
    let entries = read_entries(&dir.join(ENTRIES_FILE))?;
    let path = dir.join(REFINEMENT_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let refinement: RefinementMatrices =
        serde_json::from_str(&text).map_err(|e| Error::format("refinement matrices", e.to_string()))?;
    if vocab.len() != model.config.vocab_size || entries.len() != vocab.n_added() {
        return Err(Error::format(
            "expanded model",
            format!(
                "{} vocabulary tokens and {} entries for a model with {} rows",
                vocab.len(),
                entries.len(),
                model.config.vocab_size
            ),
        ));
    }
    Ok(ExpandedModel {
        model,
        vocab,
        entries,
        refinement,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};

    #[test]
    fn round_trip() {
        let v = Vocabulary::from_merges(&[(" ", "a")]).unwrap();
        let m = Model::new(ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            vocab_size: v.len(),
            max_seq: 8,
            rope_base: 10_000.0,
            seed: 0,
        })
        .unwrap();
        let row = m.embedding(3).to_vec();
        let entry = ExpansionEntry {
            word: "alpha".into(),
            original_ids: v.encode_word("alpha"),
            layer: 1,
            new_id: v.len() as u32,
            r: vec![0.1; 8],
            e_hat: row.clone(),
            u_hat: row.clone(),
            e: row.clone(),
            u: row,
        };
        let mut w = RefinementMatrices::zeros(8);
        w.w_e.set(0, 1, 0.25);
        let ex = ExpandedModel::assemble(&m, &v, vec![entry], w).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_expanded(&ex, dir.path()).unwrap();
        let back = load_expanded(dir.path()).unwrap();
        assert_eq!(back.model, ex.model);
        assert_eq!(back.vocab, ex.vocab);
        assert_eq!(back.refinement, ex.refinement);
        assert_eq!(back.entries[0].e, ex.entries[0].e);
        assert_eq!(back.entries[0].word, "alpha");
        assert!((back.entries[0].r[0] - 0.1).abs() < 1e-7);
        std::fs::write(dir.path().join(ENTRIES_FILE), "{oops\n").unwrap();
        assert!(load_expanded(dir.path()).is_err());
    }
}
