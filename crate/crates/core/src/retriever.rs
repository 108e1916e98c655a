//! Multi-hop evidence retrieval: per-hop query composition and beam search
//! over evidence chains.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CorpusTokens, Passage, PassageStore, Question, Vocabulary};
use crate::encoder::{DualEncoder, EncoderParams};
use crate::error::{Error, Result};
use crate::index::{DenseIndex, LexicalIndex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceChain {
    #[serde(rename = "pieces")]
    pub piece_ids: Vec<String>,
    pub step_scores: Vec<f64>,
    pub chain_score: f64,
}

impl EvidenceChain {
    /// Chain with `chain_score = Σ step_scores`.
    pub fn new(piece_ids: Vec<String>, step_scores: Vec<f64>) -> Self {
        let chain_score = step_scores.iter().fold(0.0, |a, s| a + s);
        Self {
            piece_ids,
            step_scores,
            chain_score,
        }
    }

    pub fn len(&self) -> usize {
        self.piece_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.piece_ids.is_empty()
    }

    pub fn same_pieces(&self, other: &EvidenceChain) -> bool {
        self.piece_ids == other.piece_ids
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreCombine {
    /// Sum of raw step scores, i.e. the log of the product of `exp(f)`.
    #[default]
    Sum,
    /// Literal product; only sensible for strictly positive step scores.
    Product,
}

impl ScoreCombine {
    fn init(self) -> f64 {
        match self {
            ScoreCombine::Sum => 0.0,
            ScoreCombine::Product => 1.0,
        }
    }

    fn fold(self, acc: f64, step: f64) -> f64 {
        match self {
            ScoreCombine::Sum => acc + step,
            ScoreCombine::Product => acc * step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub n_hops: usize,
    pub beam_width: usize,
    pub top_k: usize,
    #[serde(default)]
    pub score_combine: ScoreCombine,
}

impl RetrievalConfig {
    pub fn new(n_hops: usize, beam_width: usize, top_k: usize) -> Self {
        Self {
            n_hops,
            beam_width,
            top_k,
            score_combine: ScoreCombine::Sum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_hops == 0 || self.beam_width == 0 || self.top_k == 0 {
            return Err(Error::InvalidConfig(
                "n_hops, beam_width and top_k must all be at least 1".into(),
            ));
        }
        if self.top_k > self.beam_width {
            return Err(Error::InvalidConfig(format!(
                "top_k ({}) exceeds beam_width ({})",
                self.top_k, self.beam_width
            )));
        }
        Ok(())
    }
}

/// Question text followed by each piece's title and text, space separated.
pub fn compose_query(question: &Question, pieces: &[&Passage]) -> String {
    let mut out = question.text.clone();
    for p in pieces {
        out.push(' ');
        out.push_str(&p.title);
        out.push(' ');
        out.push_str(&p.text);
    }
    out
}

/// One hop of retrieval: ranked store positions for a question plus the
/// pieces already chosen.
pub trait HopSearcher: Sync {
    fn search(&self, question: &Question, prefix: &[usize], k: usize) -> Result<Vec<(usize, f64)>>;
}

pub struct DenseSearcher<'a, E: DualEncoder + ?Sized> {
    pub encoder: &'a E,
    pub index: &'a DenseIndex,
    pub vocab: &'a Vocabulary,
    pub corpus: &'a CorpusTokens,
}

impl<'a, E: DualEncoder + ?Sized> DenseSearcher<'a, E> {
    pub fn new(encoder: &'a E, index: &'a DenseIndex, vocab: &'a Vocabulary, corpus: &'a CorpusTokens) -> Result<Self> {
        index.check_current(encoder)?;
        Ok(Self {
            encoder,
            index,
            vocab,
            corpus,
        })
    }

    pub fn query_vector(&self, question: &Question, prefix: &[usize]) -> Vec<f64> {
        let q = self.vocab.encode(&question.text);
        self.encoder.query_vector(&self.corpus.compose(&q, prefix))
    }
}

impl<E: DualEncoder + ?Sized> HopSearcher for DenseSearcher<'_, E> {
    fn search(&self, question: &Question, prefix: &[usize], k: usize) -> Result<Vec<(usize, f64)>> {
        let qv = self.query_vector(question, prefix);
        Ok(self
            .index
            .search_rows(&qv, k)?
            .into_iter()
            .map(|(row, s)| (self.index.position(row), s))
            .collect())
    }
}

pub struct LexicalSearcher<'a> {
    pub index: &'a LexicalIndex,
    pub store: &'a PassageStore,
}

impl HopSearcher for LexicalSearcher<'_> {
    fn search(&self, question: &Question, prefix: &[usize], k: usize) -> Result<Vec<(usize, f64)>> {
        let pieces: Vec<&Passage> = prefix.iter().map(|&p| self.store.at(p)).collect();
        let text = compose_query(question, &pieces);
        Ok(self
            .index
            .search_rows(&text, k)
            .into_iter()
            .map(|(row, s)| (self.index.position(row), s))
            .collect())
    }
}

struct Partial {
    pieces: Vec<usize>,
    steps: Vec<f64>,
    score: f64,
}

fn cmp_partial(store: &PassageStore, a: &Partial, b: &Partial) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| {
            let ia = a.pieces.iter().map(|&p| store.at(p).id.as_str());
            let ib = b.pieces.iter().map(|&p| store.at(p).id.as_str());
            ia.cmp(ib)
        })
}

/// Beam search with any hop searcher.
pub fn beam_search<S: HopSearcher + ?Sized>(
    searcher: &S,
    store: &PassageStore,
    question: &Question,
    cfg: &RetrievalConfig,
) -> Result<Vec<EvidenceChain>> {
    cfg.validate()?;
    if store.len() < cfg.n_hops {
        return Err(Error::CorpusTooSmall {
            passages: store.len(),
            hops: cfg.n_hops,
        });
    }
    let mut beam = vec![Partial {
        pieces: Vec::new(),
        steps: Vec::new(),
        score: cfg.score_combine.init(),
    }];
    for _ in 0..cfg.n_hops {
        let mut next = Vec::with_capacity(beam.len() * cfg.beam_width);
        for b in &beam {
            // Ask for extra hits so skipped repeats still leave beam_width.
            let hits = searcher.search(question, &b.pieces, cfg.beam_width + b.pieces.len())?;
            for (pos, s) in hits
                .into_iter()
                .filter(|(pos, _)| !b.pieces.contains(pos))
                .take(cfg.beam_width)
            {
                let mut pieces = b.pieces.clone();
                pieces.push(pos);
                let mut steps = b.steps.clone();
                steps.push(s);
                next.push(Partial {
                    pieces,
                    steps,
                    score: cfg.score_combine.fold(b.score, s),
                });
            }
        }
        next.sort_by(|a, b| cmp_partial(store, a, b));
        next.truncate(cfg.beam_width);
        beam = next;
    }
    Ok(beam
        .into_iter()
        .take(cfg.top_k)
        .map(|p| EvidenceChain {
            piece_ids: p.pieces.iter().map(|&i| store.at(i).id.clone()).collect(),
            step_scores: p.steps,
            chain_score: p.score,
        })
        .collect())
}

/// Dense beam search for one question against an index built from `params`.
pub fn beam_search_retrieve(
    index: &DenseIndex,
    params: &EncoderParams,
    vocab: &Vocabulary,
    store: &PassageStore,
    question: &Question,
    cfg: &RetrievalConfig,
) -> Result<Vec<EvidenceChain>> {
    params.check_vocab(vocab)?;
    let corpus = CorpusTokens::new(vocab, store);
    let searcher = DenseSearcher::new(params, index, vocab, &corpus)?;
    beam_search(&searcher, store, question, cfg)
}

/// Retrieves for every question in parallel, results in question order.
pub fn retrieve_all<S: HopSearcher + ?Sized>(
    searcher: &S,
    store: &PassageStore,
    questions: &[Question],
    cfg: &RetrievalConfig,
) -> Result<Vec<Vec<EvidenceChain>>> {
    questions
        .par_iter()
        .map(|q| beam_search(searcher, store, q, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_vocab;
    use crate::encoder::encode_query;
    use crate::index::{build_dense_index, build_lexical_index, dense_search};
    use crate::linalg::dot;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const WORDS: &[&str] = &["ka", "lo", "mi", "nu", "po", "ri", "su", "te", "va", "ze"];

    fn world(n: usize, seed: u64) -> (PassageStore, Question, Vocabulary, EncoderParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut text = |k: usize| (0..k).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ");
        let passages = (0..n)
            .map(|i| Passage::new(format!("p{i}"), text(1), text(3)))
            .collect();
        let store = PassageStore::new(passages).unwrap();
        let q = Question::new("q", text(3), vec!["x".into()]);
        let vocab = build_vocab(&store, std::slice::from_ref(&q));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let mut params = EncoderParams::init(vocab.size(), 4, &mut rng);
        for v in params.w_query.data.iter_mut().chain(params.w_passage.data.iter_mut()) {
            *v += rng.gen_range(-0.5..0.5);
        }
        for v in params.embeddings.data.iter_mut().skip(4) {
            *v = rng.gen_range(-1.0..1.0);
        }
        (store, q, vocab, params)
    }

    fn exhaustive(store: &PassageStore, q: &Question, vocab: &Vocabulary, params: &EncoderParams, k: usize) -> Vec<EvidenceChain> {
        let pv: Vec<Vec<f64>> = store
            .iter()
            .map(|p| crate::encoder::encode_passage(params, vocab, p).unwrap())
            .collect();
        let q1 = encode_query(params, vocab, &compose_query(q, &[])).unwrap();
        let mut all = Vec::new();
        for a in 0..store.len() {
            let q2 = encode_query(params, vocab, &compose_query(q, &[store.at(a)])).unwrap();
            for b in 0..store.len() {
                if a != b {
                    all.push(EvidenceChain::new(
                        vec![store.at(a).id.clone(), store.at(b).id.clone()],
                        vec![dot(&q1, &pv[a]), dot(&q2, &pv[b])],
                    ));
                }
            }
        }
        all.sort_by(|x, y| {
            y.chain_score
                .partial_cmp(&x.chain_score)
                .unwrap()
                .then_with(|| x.piece_ids.cmp(&y.piece_ids))
        });
        all.truncate(k);
        all
    }

    #[test]
    fn matches_exhaustive_enumeration() {
        for seed in 0..10 {
            let (store, q, vocab, params) = world(8, seed);
            let index = build_dense_index(&params, &vocab, &store).unwrap();
            let got = beam_search_retrieve(&index, &params, &vocab, &store, &q, &RetrievalConfig::new(2, 64, 56)).unwrap();
            assert_eq!(got, exhaustive(&store, &q, &vocab, &params, 56));
        }
    }

    #[test]
    fn single_hop_reduces_to_dense_search() {
        let (store, q, vocab, params) = world(30, 3);
        let index = build_dense_index(&params, &vocab, &store).unwrap();
        let chains = beam_search_retrieve(&index, &params, &vocab, &store, &q, &RetrievalConfig::new(1, 10, 5)).unwrap();
        let qv = encode_query(&params, &vocab, &q.text).unwrap();
        let hits = dense_search(&index, &qv, 5).unwrap();
        let ids: Vec<&str> = chains.iter().map(|c| c.piece_ids[0].as_str()).collect();
        assert_eq!(ids, hits.iter().map(|h| h.id.as_str()).collect::<Vec<_>>());
    }

    #[test]
    fn chain_score_is_sum_of_steps() {
        let c = EvidenceChain::new(vec!["a".into(), "b".into()], vec![1.2, 0.8]);
        assert_eq!(c.chain_score, 2.0);
    }

    #[test]
    fn compose_query_appends_title_and_text_in_order() {
        let q = Question::new("q", "who", vec!["x".into()]);
        let p1 = Passage::new("1", "T1", "one");
        let p2 = Passage::new("2", "T2", "two");
        assert_eq!(compose_query(&q, &[]), "who");
        assert_eq!(compose_query(&q, &[&p1]), "who T1 one");
        assert_ne!(compose_query(&q, &[&p1, &p2]), compose_query(&q, &[&p2, &p1]));
    }

    #[test]
    fn too_small_corpus_and_stale_index_are_errors() {
        let (store, q, vocab, mut params) = world(1, 1);
        let index = build_dense_index(&params, &vocab, &store).unwrap();
        let err = beam_search_retrieve(&index, &params, &vocab, &store, &q, &RetrievalConfig::new(2, 4, 4));
        assert!(matches!(err, Err(Error::CorpusTooSmall { .. })));
        params.version += 1;
        let err = beam_search_retrieve(&index, &params, &vocab, &store, &q, &RetrievalConfig::new(1, 4, 4));
        assert!(matches!(err, Err(Error::StaleIndex { .. })));
    }

    #[test]
    fn lexical_beam_follows_bridge_words() {
        let store = PassageStore::new(vec![
            Passage::new("a", "Alpha", "Alpha joined Zorbu Lab."),
            Passage::new("b", "Zorbu Lab", "Zorbu Lab is in Quenta."),
            Passage::new("c", "Other", "Nothing relevant here."),
        ])
        .unwrap();
        let lex = build_lexical_index(&store).unwrap();
        let q = Question::new("q", "Where is the lab Alpha joined?", vec!["Quenta".into()]);
        let chains = beam_search(&LexicalSearcher { index: &lex, store: &store }, &store, &q, &RetrievalConfig::new(2, 3, 1)).unwrap();
        assert_eq!(chains[0].piece_ids, ["a", "b"]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn widening_never_hurts_and_chains_never_repeat(seed in 0u64..1000, width in 1usize..6) {
            let (store, q, vocab, params) = world(12, seed);
            let index = build_dense_index(&params, &vocab, &store).unwrap();
            let narrow = beam_search_retrieve(&index, &params, &vocab, &store, &q, &RetrievalConfig::new(2, width, 1)).unwrap();
            let wide = beam_search_retrieve(&index, &params, &vocab, &store, &q, &RetrievalConfig::new(2, width + 3, 1)).unwrap();
            prop_assert!(wide[0].chain_score >= narrow[0].chain_score);
            let all = beam_search_retrieve(&index, &params, &vocab, &store, &q, &RetrievalConfig::new(3, 6, 6)).unwrap();
            for c in &all {
                let mut ids = c.piece_ids.clone();
                ids.sort();
                ids.dedup();
                prop_assert_eq!(ids.len(), 3);
                prop_assert_eq!(c.chain_score, c.step_scores.iter().fold(0.0, |a, s| a + s));
            }
        }
    }
}
