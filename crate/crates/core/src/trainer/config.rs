use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retriever::ScoreCombine;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FilterMode {
    /// Top-1 chain is the positive whether or not it has the answer.
    #[serde(rename = "none")]
    None,
    #[serde(rename = "answer")]
    Answer,
    #[default]
    #[serde(rename = "answer+reader")]
    AnswerReader,
}

impl FilterMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "answer" => Ok(Self::Answer),
            "answer+reader" | "answer-reader" => Ok(Self::AnswerReader),
            other => Err(Error::InvalidConfig(format!("unknown filter mode `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Answer => "answer",
            Self::AnswerReader => "answer+reader",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveSelection {
    #[default]
    Top1,
    SampleTopk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    #[default]
    LexicalWarmstart,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerScope {
    #[default]
    AnyPiece,
    FinalHopOnly,
}

/// Where the reader's token table starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReaderInit {
    #[default]
    Fresh,
    CopyEncoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub iterations: usize,
    pub hops: usize,
    /// E-step retrieval depth.
    pub k_estep: usize,
    pub beam_width: usize,
    /// Depth of the per-iteration dev metrics.
    pub eval_k: usize,
    pub filter_mode: FilterMode,
    pub positive_selection: PositiveSelection,
    pub negatives_per_question: usize,
    pub in_batch_negatives: bool,
    pub init_mode: InitMode,
    pub warm_start_k: usize,
    pub warm_start_epochs: usize,
    pub reader_bootstrap_k: usize,
    pub reader_bootstrap_epochs: usize,
    pub reader_init: ReaderInit,
    pub epochs_per_mstep: usize,
    pub dim: usize,
    /// Half-width of the uniform embedding init.
    pub embedding_init_range: f64,
    /// W_q starts as this multiple of the identity.
    pub query_init_scale: f64,
    /// W_p starts as this multiple of the identity.
    pub passage_init_scale: f64,
    pub lr: f64,
    pub reader_lr: f64,
    pub batch_size: usize,
    pub answer_scope: AnswerScope,
    /// Keep only mined positives that equal the gold chain.
    pub gold_only: bool,
    /// Re-initialize both models before every M-step.
    pub reinit_each_mstep: bool,
    pub early_stop_delta: f64,
    pub early_stop_patience: usize,
    /// Early stopping never triggers before this many iterations.
    pub min_iterations: usize,
    pub eval_exact_match: bool,
    pub single_chain_recall: bool,
    pub score_combine: ScoreCombine,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            iterations: 8,
            hops: 2,
            k_estep: 10,
            beam_width: 10,
            eval_k: 10,
            filter_mode: FilterMode::AnswerReader,
            positive_selection: PositiveSelection::Top1,
            negatives_per_question: 1,
            in_batch_negatives: true,
            init_mode: InitMode::LexicalWarmstart,
            warm_start_k: 20,
            warm_start_epochs: 2,
            reader_bootstrap_k: 50,
            reader_bootstrap_epochs: 3,
            reader_init: ReaderInit::Fresh,
            epochs_per_mstep: 1,
            dim: 256,
            embedding_init_range: 0.15,
            query_init_scale: 20.0,
            passage_init_scale: 20.0,
            lr: 1e-3,
            reader_lr: 1e-3,
            batch_size: 32,
            answer_scope: AnswerScope::AnyPiece,
            gold_only: false,
            reinit_each_mstep: false,
            early_stop_delta: 0.005,
            early_stop_patience: 2,
            min_iterations: 5,
            eval_exact_match: true,
            single_chain_recall: false,
            score_combine: ScoreCombine::Sum,
            seed: 42,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.hops == 0 {
            return bad("hops must be at least 1");
        }
        if self.k_estep == 0 || self.eval_k == 0 || self.beam_width == 0 {
            return bad("k_estep, eval_k and beam_width must be at least 1");
        }
        if self.reader_bootstrap_k == 0 || self.warm_start_k == 0 {
            return bad("warm_start_k and reader_bootstrap_k must be at least 1");
        }
        if self.dim == 0 || self.batch_size == 0 {
            return bad("dim and batch_size must be at least 1");
        }
        if !(self.embedding_init_range > 0.0 && self.embedding_init_range.is_finite())
            || !(self.query_init_scale > 0.0 && self.query_init_scale.is_finite())
            || !(self.passage_init_scale > 0.0 && self.passage_init_scale.is_finite())
        {
            return bad("embedding_init_range and the projection init scales must be positive and finite");
        }
        if !(self.lr > 0.0 && self.reader_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }
}
