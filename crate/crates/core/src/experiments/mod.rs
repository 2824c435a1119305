//! End-to-end analyses over a trained model: word/nonword probing, split and
//! typo retrieval, patching-based retrieval, FFN retrieval and ablation, and
//! attention aggregation.
//!
//! Every experiment takes candidate [`WordRecord`]s (word tokens plus
//! preceding context), applies its own eligibility filter, and returns an
//! [`ExperimentReport`] of per-layer series.

mod attention;
mod probing;
mod retrieval;
mod stats;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::probes::RetrievalCurve;

pub use attention::{attention_aggregation, attention_to_previous};
pub use probing::{probe_accuracy_by_layer, sample_nonwords, word_vs_nonword, TokenPosition};
pub use retrieval::{
    ffn_ablation, ffn_retrieval, make_split_item, multi_token_retrieval, patchscope_retrieval, plan_ablation,
    split_retrieval, AblationPolicy, SplitItem, SplitMode, DEFAULT_SUFFIXES,
};
pub use stats::{one_sided_t_test, Direction, TTestResult};

/// One per-layer series. `group` distinguishes series plotted together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub values: Vec<f64>,
}

impl Series {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            group: None,
            values,
        }
    }

    pub fn grouped(name: impl Into<String>, group: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            group: Some(group.into()),
            values,
        }
    }
}

/// Provenance needed to re-run an experiment bit-identically.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metadata {
    pub config_hash: String,
    pub seed: u64,
    pub corpus_id: String,
    /// Left empty unless the run config provides one, so reruns stay identical.
    #[serde(default)]
    pub timestamp: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub series: Vec<Series>,
    #[serde(default)]
    pub stats: Vec<TTestResult>,
    /// Scalar summaries such as item counts.
    #[serde(default)]
    pub scalars: BTreeMap<String, f64>,
    #[serde(default)]
    pub metadata: Metadata,
}

impl ExperimentReport {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            series: Vec::new(),
            stats: Vec::new(),
            scalars: BTreeMap::new(),
            metadata: Metadata::default(),
        }
    }

    pub fn series(&self, name: &str) -> Option<&Series> {
        self.series.iter().find(|s| s.name == name && s.group.is_none())
    }

    pub fn grouped(&self, name: &str, group: &str) -> Option<&Series> {
        self.series
            .iter()
            .find(|s| s.name == name && s.group.as_deref() == Some(group))
    }

    pub(crate) fn push_curve(&mut self, prefix: &str, curve: &RetrievalCurve) {
        let name = |s: &str| {
            if prefix.is_empty() {
                s.to_owned()
            } else {
                format!("{prefix}_{s}")
            }
        };
        self.series
            .push(Series::new(name("per_layer"), curve.per_layer.clone()));
        self.series
            .push(Series::new(name("cumulative"), curve.cumulative.clone()));
    }

    /// One CSV per series name, `layer,value[,group]`. Keys are file stems.
    pub fn curve_csvs(&self) -> BTreeMap<String, String> {
        let mut out: BTreeMap<String, String> = BTreeMap::new();
        for s in &self.series {
            let grouped = self.series.iter().any(|o| o.name == s.name && o.group.is_some());
            let csv = out.entry(s.name.clone()).or_insert_with(|| {
                if grouped {
                    "layer,value,group\n".to_owned()
                } else {
                    "layer,value\n".to_owned()
                }
            });
            for (l, v) in s.values.iter().enumerate() {
                match &s.group {
                    Some(g) => {
                        let _ = writeln!(csv, "{l},{v},{g}");
                    }
                    None if grouped => {
                        let _ = writeln!(csv, "{l},{v},");
                    }
                    None => {
                        let _ = writeln!(csv, "{l},{v}");
                    }
                }
            }
        }
        out
    }
}
