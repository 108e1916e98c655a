//! Hard-EM training: lexical warm start, reader bootstrap, then alternating
//! evidence mining (E-step) and retriever/reader updates (M-step).

mod config;
mod em;
mod steps;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{build_vocab, CorpusTokens, Dataset, Passage, PassageStore, Question, Vocabulary};
use crate::encoder::EncoderParams;
use crate::error::Result;
use crate::harness::{contains_any_answer, normalize_answer};
use crate::index::{build_dense_index_with, build_lexical_index, DenseIndex, LexicalIndex};
use crate::optim::OptState;
use crate::reader::{predict_inputs, ReaderInput, ReaderParams};
use crate::retriever::{DenseSearcher, EvidenceChain, RetrievalConfig};

pub use config::{AnswerScope, EmConfig, FilterMode, InitMode, PositiveSelection, ReaderInit};
pub use em::{
    checkpoint_name, dump_embeddings, evaluate_dev, examples_name, margin_diagnostics, run_ablation, run_em,
    run_em_in, AblationArm, DevEval, EmRun, IterationStats, RunOptions, Variant, STATS_FILE,
};
pub use steps::{bootstrap_reader, e_step, m_step, warm_start, Candidate, EStepOutput, ExampleDump, Role};

/// Mined supervision for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    pub question_id: String,
    pub positive: EvidenceChain,
    pub negatives: Vec<EvidenceChain>,
}

/// Immutable inputs shared by every stage.
pub struct Workspace {
    pub store: PassageStore,
    pub vocab: Vocabulary,
    pub corpus: CorpusTokens,
    pub lexical: LexicalIndex,
    pub train: Vec<Question>,
    pub dev: Vec<Question>,
}

impl Workspace {
    pub fn new(data: &Dataset) -> Result<Self> {
        let vocab = build_vocab(&data.passages, &data.all_questions());
        Self::with_vocab(data, vocab)
    }

    pub fn with_vocab(data: &Dataset, vocab: Vocabulary) -> Result<Self> {
        let corpus = CorpusTokens::new(&vocab, &data.passages);
        Ok(Self {
            lexical: build_lexical_index(&data.passages)?,
            store: data.passages.clone(),
            vocab,
            corpus,
            train: data.train.clone(),
            dev: data.dev.clone(),
        })
    }

    pub fn question(&self, id: &str) -> Option<&Question> {
        self.train.iter().chain(&self.dev).find(|q| q.id == id)
    }
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct EmState {
    pub encoder: EncoderParams,
    pub reader: ReaderParams,
    pub encoder_opt: OptState,
    pub reader_opt: OptState,
    pub index: DenseIndex,
}

impl EmState {
    /// Fresh parameters from the configured seed, index built.
    pub fn init(ws: &Workspace, cfg: &EmConfig) -> Result<Self> {
        let encoder = EncoderParams::init_scaled(
            ws.vocab.size(),
            cfg.dim,
            cfg.embedding_init_range,
            cfg.query_init_scale,
            cfg.passage_init_scale,
            &mut stage_rng(cfg.seed, "encoder-init", 0),
        );
        let reader = fresh_reader(&encoder, cfg, 0);
        Ok(Self {
            encoder_opt: encoder.new_opt_state(cfg.lr),
            reader_opt: reader.new_opt_state(cfg.reader_lr),
            index: build_dense_index_with(&encoder, &ws.corpus, &ws.store)?,
            encoder,
            reader,
        })
    }

    pub fn searcher<'a>(&'a self, ws: &'a Workspace) -> Result<DenseSearcher<'a, EncoderParams>> {
        DenseSearcher::new(&self.encoder, &self.index, &ws.vocab, &ws.corpus)
    }
}

pub(crate) fn fresh_reader(encoder: &EncoderParams, cfg: &EmConfig, iteration: usize) -> ReaderParams {
    let mut rng = stage_rng(cfg.seed, "reader-init", iteration);
    match cfg.reader_init {
        ReaderInit::Fresh => ReaderParams::init(encoder.vocab_size(), encoder.dim, &mut rng),
        ReaderInit::CopyEncoder => ReaderParams::from_encoder(encoder, &mut rng),
    }
}

/// Independent, reproducible stream per (seed, stage, iteration).
pub fn stage_rng(seed: u64, stage: &str, iteration: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((stage.len() as u64).to_le_bytes());
    h.update(stage.as_bytes());
    h.update((iteration as u64).to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

pub(crate) fn retrieval_config(cfg: &EmConfig, top_k: usize) -> RetrievalConfig {
    RetrievalConfig {
        n_hops: cfg.hops,
        beam_width: cfg.beam_width.max(top_k),
        top_k,
        score_combine: cfg.score_combine,
    }
}

/// Answer presence in one passage's text (the title is not searched).
pub fn answer_match_passage(passage: &Passage, answers: &[String]) -> bool {
    contains_any_answer(&passage.text, answers)
}

/// Answer presence in any piece, or only the final one under
/// `AnswerScope::FinalHopOnly`.
pub fn answer_match(chain: &EvidenceChain, answers: &[String], store: &PassageStore, scope: AnswerScope) -> Result<bool> {
    let pieces = store.resolve(&chain.piece_ids)?;
    Ok(match scope {
        AnswerScope::AnyPiece => pieces.iter().any(|p| answer_match_passage(p, answers)),
        AnswerScope::FinalHopOnly => pieces.last().is_some_and(|p| answer_match_passage(p, answers)),
    })
}

/// True iff the reader, given only this chain, predicts a gold answer.
pub fn reader_filter(reader: &ReaderParams, vocab: &Vocabulary, store: &PassageStore, question: &Question, chain: &EvidenceChain) -> Result<bool> {
    let input = ReaderInput::from_chain(vocab, store, question, chain)?;
    reader_filter_input(reader, question, &input)
}

pub(crate) fn reader_filter_input(reader: &ReaderParams, question: &Question, input: &ReaderInput) -> Result<bool> {
    let pred = predict_inputs(reader, std::slice::from_ref(input))?;
    let got = normalize_answer(&pred.answer_text);
    Ok(question.answers.iter().any(|a| normalize_answer(a) == got))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Passage;
    use rand::Rng;

    fn store() -> PassageStore {
        PassageStore::new(vec![
            Passage::new("a", "Kel Ra", "Kel Ra is employed by Zorbu Lab."),
            Passage::new("b", "Zorbu Lab", "Zorbu Lab is based in Rutgers University."),
            Passage::new("c", "Tovan", "A mistake was made."),
        ])
        .unwrap()
    }

    fn chain(ids: &[&str]) -> EvidenceChain {
        EvidenceChain::new(ids.iter().map(|s| s.to_string()).collect(), vec![0.0; ids.len()])
    }

    #[test]
    fn answer_match_rules() {
        let s = store();
        let ans = vec!["rutgers university".to_string()];
        assert!(answer_match(&chain(&["a", "b"]), &ans, &s, AnswerScope::AnyPiece).unwrap());
        assert!(!answer_match(&chain(&["a", "c"]), &ans, &s, AnswerScope::AnyPiece).unwrap());
        let mist = vec!["mist".to_string()];
        assert!(!answer_match(&chain(&["c"]), &mist, &s, AnswerScope::AnyPiece).unwrap());
        // titles are not searched
        let tovan = vec!["Tovan".to_string()];
        assert!(!answer_match(&chain(&["c"]), &tovan, &s, AnswerScope::AnyPiece).unwrap());
        assert!(answer_match(&chain(&["b", "a"]), &ans, &s, AnswerScope::AnyPiece).unwrap());
        assert!(!answer_match(&chain(&["b", "a"]), &ans, &s, AnswerScope::FinalHopOnly).unwrap());
    }

    #[test]
    fn stage_streams_are_stable_and_distinct() {
        let a: u64 = stage_rng(1, "x", 0).gen();
        let b: u64 = stage_rng(1, "x", 0).gen();
        let c: u64 = stage_rng(1, "x", 1).gen();
        let d: u64 = stage_rng(1, "y", 0).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
