//! Weakly-supervised open-domain question answering over a passage corpus.
//!
//! A dense multi-hop retriever and an extractive reader are trained from
//! question/answer pairs alone: each EM iteration retrieves candidate
//! evidence chains, keeps the ones that contain (and let the reader recover)
//! the answer as pseudo-positives, and trains both models on them.

pub mod data;
pub mod encoder;
pub mod error;
pub(crate) mod fsutil;
pub mod harness;
pub mod index;
pub mod linalg;
pub mod optim;
pub mod reader;
pub mod retriever;
pub mod trainer;

pub use data::{Dataset, GenConfig, Passage, PassageStore, Question, Vocabulary};
pub use error::{Error, Result};
pub use retriever::{EvidenceChain, RetrievalConfig, ScoreCombine};
pub use trainer::{run_em, EmConfig, FilterMode, RunOptions};
