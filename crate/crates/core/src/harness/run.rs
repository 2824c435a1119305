use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::corpus::{read_documents, CorpusIndex, WordFilter};
use crate::error::{Error, Result};
use crate::expansion::{evaluate_top1, expand_vocabulary, save_expanded, token_reduction};
use crate::experiments::{
    attention_aggregation, ffn_ablation, ffn_retrieval, multi_token_retrieval, patchscope_retrieval,
    sample_nonwords, split_retrieval, word_vs_nonword, ExperimentReport, Metadata, Series, SplitMode,
};
use crate::model::{load_checkpoint, Model};
use crate::patchscope::build_patch_prompt;
use crate::tokenizer::Vocabulary;

pub const REPORT_FILE: &str = "report.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CURVES_DIR: &str = "curves";
pub const EXPANDED_DIR: &str = "expanded";

/// Content hashes of every file a run wrote.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    /// Relative path to SHA-256.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: ExperimentReport,
    pub manifest: Manifest,
}

fn words_for(
    idx: &CorpusIndex,
    filter: &WordFilter,
    cfg: &RunConfig,
    model: &Model,
) -> Vec<crate::tokenizer::WordRecord> {
    let context = cfg.context.min(model.config.max_seq / 2);
    idx.records(filter, context, cfg.seed)
}

fn split_filter(mode: SplitMode) -> WordFilter {
    match mode {
        SplitMode::Artificial => WordFilter::single_token(),
        SplitMode::Typo => WordFilter::typo(),
        SplitMode::Suffix => WordFilter::SuffixSplit,
    }
}

/// Computes the configured experiment without writing anything.
pub fn compute(cfg: &RunConfig) -> Result<(ExperimentReport, Option<crate::expansion::ExpandedModel>)> {
    cfg.validate()?;
    let vocab = Vocabulary::load(&cfg.paths.vocab)?;
    let model = load_checkpoint(&cfg.paths.checkpoint)?;
    if vocab.len() != model.config.vocab_size {
        return Err(Error::DimensionMismatch {
            expected: model.config.vocab_size,
            got: vocab.len(),
        });
    }
    let docs = read_documents(&cfg.paths.corpus)?;
    let idx = CorpusIndex::from_documents(&docs, &vocab);
    let seed = cfg.seed;
    let mut expanded = None;
    let mut report = match cfg.experiment.as_str() {
        "word-vs-nonword" => {
            let words = words_for(&idx, &WordFilter::MultiToken, cfg, &model);
            let nonwords = sample_nonwords(&vocab, &words, words.len(), seed)?;
            let ids: Vec<_> = words.iter().map(|w| w.token_ids.clone()).collect();
            word_vs_nonword(&model, &ids, &nonwords, cfg.probing.position, seed, cfg.probing.k)?
        }
        "split-retrieval" => {
            let mode = cfg.retrieval.mode;
            split_retrieval(
                &model,
                &vocab,
                &words_for(&idx, &split_filter(mode), cfg, &model),
                mode,
                seed,
            )?
        }
        "ffn-retrieval" => {
            let mode = cfg.retrieval.mode;
            ffn_retrieval(
                &model,
                &vocab,
                &words_for(&idx, &split_filter(mode), cfg, &model),
                mode,
                seed,
            )?
        }
        "ffn-ablation" => {
            let words = words_for(&idx, &WordFilter::SuffixSplit, cfg, &model);
            ffn_ablation(&model, &vocab, &words, cfg.retrieval.policy, seed)?
        }
        "patchscope-retrieval" | "multi-token-retrieval" => {
            let prompt = build_patch_prompt(&vocab, &cfg.patchscope.template)?;
            let mode = cfg.patchscope.mode;
            if cfg.experiment == "patchscope-retrieval" {
                let words = words_for(&idx, &WordFilter::Any, cfg, &model);
                patchscope_retrieval(&model, &vocab, &words, &prompt, mode)?
            } else {
                let words = words_for(&idx, &WordFilter::MultiToken, cfg, &model);
                multi_token_retrieval(&model, &vocab, &words, &prompt, mode)?
            }
        }
        "attention-aggregation" => {
            let words = words_for(&idx, &WordFilter::Any, cfg, &model);
            attention_aggregation(&model, &words, cfg.attention.max_word_tokens)?
        }
        "expand" => {
            let test = read_documents(&cfg.paths.test_corpus)?;
            let run = expand_vocabulary(&model, &vocab, &docs, &test, &cfg.expand)?;
            let ex = run.expanded;
            let mut r = ExperimentReport::new("expand");
            let mut per_layer = vec![0.0; model.n_layers() + 1];
            for e in &ex.entries {
                per_layer[e.layer] += 1.0;
            }
            r.series.push(Series::new("accepted_per_layer", per_layer));
            let s = &mut r.scalars;
            s.insert("n_candidates".into(), run.n_candidates as f64);
            s.insert("n_accepted".into(), ex.entries.len() as f64);
            s.insert("n_skipped".into(), run.skipped.len() as f64);
            let words: Vec<&str> = ex.entries.iter().map(|e| e.word.as_str()).collect();
            s.insert(
                "token_reduction_pct".into(),
                token_reduction(&vocab, &words, &test)?,
            );
            let before = evaluate_top1(&model, &vocab, &test)?;
            let after = evaluate_top1(&ex.model, &ex.vocab, &test)?;
            s.insert("original_all_words_acc".into(), before.all_words_acc);
            s.insert("all_words_acc".into(), after.all_words_acc);
            if let Some(a) = after.new_token_acc {
                s.insert("new_token_acc".into(), a);
            }
            if let Some(a) = after.original_or_new_acc {
                s.insert("original_or_new_acc".into(), a);
            }
            if let Some(rep) = &run.refine {
                if let (Some(first), Some(last)) = (rep.losses.first(), rep.losses.last()) {
                    s.insert("refine_loss_first".into(), *first);
                    s.insert("refine_loss_last".into(), *last);
                }
                let new: Vec<f64> = rep.new_word_losses.iter().flatten().copied().collect();
                if let (Some(first), Some(last)) = (new.first(), new.last()) {
                    s.insert("new_word_loss_first".into(), *first);
                    s.insert("new_word_loss_last".into(), *last);
                }
            }
            expanded = Some(ex);
            r
        }
        other => return Err(Error::Config(format!("unknown experiment {other:?}"))),
    };
    report.name = cfg.experiment.clone();
    report.metadata = Metadata {
        config_hash: cfg.hash(),
        seed,
        corpus_id: idx.corpus_id.clone(),
        timestamp: cfg.timestamp.clone(),
    };
    Ok((report, expanded))
}

fn write_file(root: &Path, rel: &str, bytes: &[u8], files: &mut BTreeMap<String, String>) -> Result<()> {
    let path = root.join(rel);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    files.insert(rel.to_owned(), hex::encode(Sha256::digest(bytes)));
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v).map_err(|e| Error::Internal(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

/// Runs the configured experiment and writes `report.json`, `curves/*.csv`
/// and `manifest.json` (plus `expanded/` for expansion) under the output dir.
pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    let (report, expanded) = compute(cfg)?;
    let root = &cfg.paths.output_dir;
    for stale in [CURVES_DIR, EXPANDED_DIR] {
        let dir = root.join(stale);
        if dir.is_dir() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }
    let mut files = BTreeMap::new();
    write_file(root, REPORT_FILE, &to_json(&report)?, &mut files)?;
    for (stem, csv) in report.curve_csvs() {
        write_file(
            root,
            &format!("{CURVES_DIR}/{stem}.csv"),
            csv.as_bytes(),
            &mut files,
        )?;
    }
    if let Some(ex) = &expanded {
        let dir = root.join(EXPANDED_DIR);
        save_expanded(ex, &dir)?;
        let mut names: Vec<String> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
            .collect();
        names.sort();
        for name in names {
            let path = dir.join(&name);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            files.insert(
                format!("{EXPANDED_DIR}/{name}"),
                hex::encode(Sha256::digest(bytes)),
            );
        }
    }
    let manifest = Manifest {
        experiment: cfg.experiment.clone(),
        config_hash: report.metadata.config_hash.clone(),
        seed: cfg.seed,
        files,
    };
    let mut ignored = BTreeMap::new();
    write_file(root, MANIFEST_FILE, &to_json(&manifest)?, &mut ignored)?;
    Ok(RunOutput { report, manifest })
}

/// Reads a report written by [`run`].
pub fn read_report(path: &Path) -> Result<ExperimentReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format("report", e.to_string()))
}

/// Checks that every file the manifest lists still has its recorded hash.
pub fn verify_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))?;
    for (rel, hash) in &manifest.files {
        let p = dir.join(rel);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if hex::encode(Sha256::digest(bytes)) != *hash {
            return Err(Error::format(
                "manifest",
                format!("{rel} does not match its hash"),
            ));
        }
    }
    Ok(manifest)
}
