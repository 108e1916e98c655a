//! Evaluation metrics, answer normalization, result files, metrics reports
//! and checkpoints.

mod checkpoint;
mod metrics;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_jsonl, write_jsonl};
use crate::error::Result;
use crate::fsutil::write_atomic;
use crate::retriever::EvidenceChain;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use metrics::{
    answer_recall, build_report, chain_recall, exact_match_score, passage_recall, MetricsReport, QuestionMetrics,
    Recall, REPORT_SCHEMA_VERSION,
};

/// Lowercase, drop characters that are neither alphanumeric nor whitespace,
/// drop the whole-word articles "a", "an", "the", collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// True iff the normalized `answer` occurs as a contiguous run of whole
/// tokens in the normalized `text`.
pub fn contains_answer(text: &str, answer: &str) -> bool {
    let a = normalize_answer(answer);
    if a.is_empty() {
        return false;
    }
    let t = normalize_answer(text);
    let hay: Vec<&str> = t.split_whitespace().collect();
    let needle: Vec<&str> = a.split_whitespace().collect();
    hay.windows(needle.len()).any(|w| w == needle.as_slice())
}

pub fn contains_any_answer(text: &str, answers: &[String]) -> bool {
    answers.iter().any(|a| contains_answer(text, a))
}

/// Retrieved chains for one question, as written to `retrievals.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub question_id: String,
    pub chains: Vec<EvidenceChain>,
}

impl Retrieval {
    pub fn new(question_id: impl Into<String>, chains: Vec<EvidenceChain>) -> Self {
        Self {
            question_id: question_id.into(),
            chains,
        }
    }

    /// Chains with zero scores, for fixtures and identity evaluations.
    pub fn from_piece_lists(question_id: &str, lists: Vec<Vec<String>>) -> Self {
        Self::new(
            question_id,
            lists
                .into_iter()
                .map(|l| {
                    let n = l.len();
                    EvidenceChain::new(l, vec![0.0; n])
                })
                .collect(),
        )
    }

    /// Union of pieces over the first `k` chains, in first-seen order.
    pub fn pieces(&self, k: usize) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for c in self.chains.iter().take(k) {
            for p in &c.piece_ids {
                if !out.contains(&p.as_str()) {
                    out.push(p);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub question_id: String,
    pub answer: String,
    pub span_prob: f64,
    pub rerank_prob: f64,
}

pub fn save_retrievals(path: &Path, retrievals: &[Retrieval]) -> Result<()> {
    write_jsonl(path, retrievals)
}

pub fn load_retrievals(path: &Path) -> Result<Vec<Retrieval>> {
    read_jsonl(path, |_: &Retrieval, _| Ok(()))
}

pub fn save_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    write_jsonl(path, predictions)
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>> {
    read_jsonl(path, |_: &Prediction, _| Ok(()))
}

/// Pretty JSON written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| crate::error::Error::InvalidData(format!("serialize: {e}")))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| crate::error::Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| crate::error::Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}
