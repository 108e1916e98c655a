//! Dual encoder over bags of tokens: `Enc_Q(x) = W_q · mean(E[x])` and
//! `Enc_P(x) = W_p · mean(E[x])` with a shared embedding table, scored by
//! dot product. Includes the step-wise contrastive NLL over evidence chains
//! and its analytic gradient.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{passage_token_ids, CorpusTokens, Passage, PassageStore, Question, Vocabulary, UNK_ID};
use crate::error::{Error, Result};
use crate::linalg::{dot, log_sum_exp, Matrix};
use crate::optim::OptState;
use crate::retriever::EvidenceChain;

/// Anything that maps token bags to query and passage vectors.
///
/// The dense index and the beam search only need this surface, so a
/// different encoder can stand in for [`EncoderParams`].
pub trait DualEncoder: Sync {
    fn dim(&self) -> usize;
    /// Bumped on every parameter update; used to detect stale indexes.
    fn version(&self) -> u64;
    fn query_vector(&self, tokens: &[u32]) -> Vec<f64>;
    fn passage_vector(&self, tokens: &[u32]) -> Vec<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub dim: usize,
    /// `|V|+1` rows; row 0 is the unknown token.
    pub embeddings: Matrix,
    pub w_query: Matrix,
    pub w_passage: Matrix,
    #[serde(default)]
    pub version: u64,
}

impl EncoderParams {
    /// Embedding rows uniform in `±0.5/d` (UNK row zero), identity projections.
    pub fn init<R: Rng>(vocab_size: usize, dim: usize, rng: &mut R) -> Self {
        Self::init_scaled(vocab_size, dim, 0.5 / dim as f64, 1.0, 1.0, rng)
    }

    /// E uniform in ±`embedding_range` (UNK row zero), W_q = `query_scale`·I,
    /// W_p = `passage_scale`·I.
    pub fn init_scaled<R: Rng>(
        vocab_size: usize,
        dim: usize,
        embedding_range: f64,
        query_scale: f64,
        passage_scale: f64,
        rng: &mut R,
    ) -> Self {
        let bound = embedding_range;
        let mut embeddings = Matrix::zeros(vocab_size, dim);
        for v in embeddings.data.iter_mut().skip(dim) {
            *v = rng.gen_range(-bound..bound);
        }
        Self {
            dim,
            embeddings,
            w_query: Matrix::diagonal(dim, query_scale),
            w_passage: Matrix::diagonal(dim, passage_scale),
            version: 0,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embeddings.rows
    }

    pub fn mean_embedding(&self, tokens: &[u32]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        if tokens.is_empty() {
            return out;
        }
        for &t in tokens {
            for (o, e) in out.iter_mut().zip(self.embeddings.row(t as usize)) {
                *o += e;
            }
        }
        let inv = 1.0 / tokens.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        out
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if vocab.size() != self.embeddings.rows {
            return Err(Error::Dimension {
                expected: self.embeddings.rows,
                got: vocab.size(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.embeddings.is_finite() && self.w_query.is_finite() && self.w_passage.is_finite()
    }

    pub fn block_sizes(&self) -> [usize; 3] {
        [
            self.embeddings.data.len(),
            self.w_query.data.len(),
            self.w_passage.data.len(),
        ]
    }

    pub fn new_opt_state(&self, lr: f64) -> OptState {
        OptState::new(lr, &self.block_sizes())
    }
}

impl DualEncoder for EncoderParams {
    fn dim(&self) -> usize {
        self.dim
    }

    fn version(&self) -> u64 {
        self.version
    }

    fn query_vector(&self, tokens: &[u32]) -> Vec<f64> {
        self.w_query.matvec(&self.mean_embedding(tokens))
    }

    fn passage_vector(&self, tokens: &[u32]) -> Vec<f64> {
        self.w_passage.matvec(&self.mean_embedding(tokens))
    }
}

pub fn encode_passage(params: &EncoderParams, vocab: &Vocabulary, passage: &Passage) -> Result<Vec<f64>> {
    params.check_vocab(vocab)?;
    Ok(params.passage_vector(&passage_token_ids(vocab, passage)))
}

pub fn encode_query(params: &EncoderParams, vocab: &Vocabulary, query_text: &str) -> Result<Vec<f64>> {
    params.check_vocab(vocab)?;
    Ok(params.query_vector(&vocab.encode(query_text)))
}

pub fn similarity(qv: &[f64], pv: &[f64]) -> Result<f64> {
    if qv.len() != pv.len() {
        return Err(Error::Dimension {
            expected: qv.len(),
            got: pv.len(),
        });
    }
    Ok(dot(qv, pv))
}

/// A negative chain in store positions. It contributes a term at every step
/// `t` with `first_step ≤ t < pieces.len()`, scored against its own prefix.
/// Chains shorter than the positive are treated as padded with their last
/// piece, and the padded steps are skipped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeChain {
    pub pieces: Vec<usize>,
    pub first_step: usize,
}

impl NegativeChain {
    pub fn full(pieces: Vec<usize>) -> Self {
        Self {
            pieces,
            first_step: 0,
        }
    }

    fn active(&self, step: usize) -> bool {
        step >= self.first_step && step < self.pieces.len()
    }
}

/// One question's training signal for the retriever.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainInstance {
    pub query: Vec<u32>,
    pub positive: Vec<usize>,
    pub negatives: Vec<NegativeChain>,
}

impl TrainInstance {
    pub fn new(
        vocab: &Vocabulary,
        store: &PassageStore,
        question: &Question,
        positive: &EvidenceChain,
        negatives: &[EvidenceChain],
    ) -> Result<Self> {
        let pos = positions(store, &positive.piece_ids)?;
        let negs = negatives
            .iter()
            .map(|c| positions(store, &c.piece_ids).map(NegativeChain::full))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            query: vocab.encode(&question.text),
            positive: pos,
            negatives: negs,
        })
    }
}

pub(crate) fn positions(store: &PassageStore, ids: &[String]) -> Result<Vec<usize>> {
    ids.iter()
        .map(|id| store.position(id).ok_or_else(|| Error::UnknownPassage(id.clone())))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embeddings: Matrix,
    pub w_query: Matrix,
    pub w_passage: Matrix,
}

impl Gradients {
    pub fn zeros_like(p: &EncoderParams) -> Self {
        Self {
            embeddings: Matrix::zeros(p.embeddings.rows, p.embeddings.cols),
            w_query: Matrix::zeros(p.dim, p.dim),
            w_passage: Matrix::zeros(p.dim, p.dim),
        }
    }

    fn check_finite(&self) -> Result<()> {
        for (name, m) in [
            ("embeddings", &self.embeddings),
            ("w_query", &self.w_query),
            ("w_passage", &self.w_passage),
        ] {
            if !m.is_finite() {
                return Err(Error::NonFinite(format!("encoder gradient block `{name}`")));
            }
        }
        Ok(())
    }
}

/// Step-wise NLL for one question:
/// `Σ_t −log softmax(f(q_t⁺, z_t⁺), {f(q_t⁻, z_t⁻)})[0]`.
pub fn nll_loss(
    params: &EncoderParams,
    vocab: &Vocabulary,
    question: &Question,
    positive: &EvidenceChain,
    negatives: &[EvidenceChain],
    store: &PassageStore,
) -> Result<f64> {
    params.check_vocab(vocab)?;
    let inst = TrainInstance::new(vocab, store, question, positive, negatives)?;
    let corpus = CorpusTokens::new(vocab, store);
    instance_loss(params, &corpus, &inst)
}

pub fn instance_loss(params: &EncoderParams, corpus: &CorpusTokens, inst: &TrainInstance) -> Result<f64> {
    if inst.positive.is_empty() {
        return Err(Error::EmptyChain);
    }
    let mut loss = 0.0;
    for step in 0..inst.positive.len() {
        let scores: Vec<f64> = step_terms(inst, step)
            .map(|(prefix, piece)| {
                let q = params.query_vector(&corpus.compose(&inst.query, prefix));
                let p = params.passage_vector(corpus.get(piece));
                dot(&q, &p)
            })
            .collect();
        loss += log_sum_exp(&scores) - scores[0];
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("encoder loss".into()));
    }
    Ok(loss)
}

/// `(prefix, piece)` pairs scored at `step`; the positive comes first.
fn step_terms(inst: &TrainInstance, step: usize) -> impl Iterator<Item = (&[usize], usize)> {
    std::iter::once((&inst.positive[..step], inst.positive[step])).chain(
        inst.negatives
            .iter()
            .filter(move |n| n.active(step))
            .map(move |n| (&n.pieces[..step], n.pieces[step])),
    )
}

struct Encoded {
    mean: Vec<f64>,
    vector: Vec<f64>,
    grad: Vec<f64>,
}

/// Mean loss over `batch` and its gradient with respect to all encoder
/// parameters.
pub fn nll_gradients(
    params: &EncoderParams,
    corpus: &CorpusTokens,
    batch: &[TrainInstance],
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::NoExamples("empty encoder batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = Gradients::zeros_like(params);
    let mut passages: HashMap<usize, Encoded> = HashMap::new();
    let mut passage_order: Vec<usize> = Vec::new();
    let mut total = 0.0;

    for inst in batch {
        if inst.positive.is_empty() {
            return Err(Error::EmptyChain);
        }
        // Queries are keyed by prefix within one instance.
        let mut queries: Vec<(Vec<usize>, Encoded)> = Vec::new();
        for step in 0..inst.positive.len() {
            let mut handles = Vec::new();
            let mut scores = Vec::new();
            for (prefix, piece) in step_terms(inst, step) {
                let qi = match queries.iter().position(|(k, _)| k.as_slice() == prefix) {
                    Some(i) => i,
                    None => {
                        let tokens = corpus.compose(&inst.query, prefix);
                        let mean = params.mean_embedding(&tokens);
                        let vector = params.w_query.matvec(&mean);
                        queries.push((
                            prefix.to_vec(),
                            Encoded {
                                mean,
                                vector,
                                grad: vec![0.0; params.dim],
                            },
                        ));
                        queries.len() - 1
                    }
                };
                let p = passages.entry(piece).or_insert_with(|| {
                    passage_order.push(piece);
                    let mean = params.mean_embedding(corpus.get(piece));
                    let vector = params.w_passage.matvec(&mean);
                    Encoded {
                        mean,
                        vector,
                        grad: vec![0.0; params.dim],
                    }
                });
                scores.push(dot(&queries[qi].1.vector, &p.vector));
                handles.push((qi, piece));
            }
            let lse = log_sum_exp(&scores);
            total += scale * (lse - scores[0]);
            for (j, &(qi, piece)) in handles.iter().enumerate() {
                let mut coef = (scores[j] - lse).exp();
                if j == 0 {
                    coef -= 1.0;
                }
                let coef = coef * scale;
                if coef == 0.0 {
                    continue;
                }
                let p = passages.get_mut(&piece).unwrap();
                let q = &mut queries[qi].1;
                for k in 0..params.dim {
                    q.grad[k] += coef * p.vector[k];
                    p.grad[k] += coef * q.vector[k];
                }
            }
        }
        for (prefix, q) in &queries {
            let tokens = corpus.compose(&inst.query, prefix);
            backprop_side(&params.w_query, &mut grads.w_query, &mut grads.embeddings, q, &tokens);
        }
    }
    for piece in passage_order {
        let p = &passages[&piece];
        backprop_side(
            &params.w_passage,
            &mut grads.w_passage,
            &mut grads.embeddings,
            p,
            corpus.get(piece),
        );
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("encoder loss".into()));
    }
    grads.check_finite()?;
    Ok((total, grads))
}

fn backprop_side(w: &Matrix, dw: &mut Matrix, de: &mut Matrix, enc: &Encoded, tokens: &[u32]) {
    if tokens.is_empty() || enc.grad.iter().all(|&g| g == 0.0) {
        return;
    }
    dw.add_outer(1.0, &enc.grad, &enc.mean);
    let dmean = w.matvec_t(&enc.grad);
    let inv = 1.0 / tokens.len() as f64;
    // The UNK row stays frozen at zero so unknown text remains inert.
    for &t in tokens.iter().filter(|&&t| t != UNK_ID) {
        for (d, g) in de.row_mut(t as usize).iter_mut().zip(&dmean) {
            *d += inv * g;
        }
    }
}

/// Adam update of every encoder block; bumps `params.version`.
pub fn opt_step(params: &mut EncoderParams, grads: &Gradients, state: &mut OptState) {
    state.apply(
        &mut [
            &mut params.embeddings.data[..],
            &mut params.w_query.data[..],
            &mut params.w_passage.data[..],
        ],
        &[&grads.embeddings.data, &grads.w_query.data, &grads.w_passage.data],
    );
    params.version += 1;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_vocab;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain(ids: &[&str]) -> EvidenceChain {
        EvidenceChain::new(ids.iter().map(|s| s.to_string()).collect(), vec![0.0; ids.len()])
    }

    fn tiny_store() -> PassageStore {
        PassageStore::new(vec![
            Passage::new("a", "", "x"),
            Passage::new("b", "", "y"),
            Passage::new("c", "", "x y"),
            Passage::new("d", "", "unknownword"),
        ])
        .unwrap()
    }

    fn params_for(vocab: &Vocabulary, dim: usize) -> EncoderParams {
        EncoderParams::init(vocab.size(), dim, &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn identity_encodings() {
        let store = PassageStore::new(vec![
            Passage::new("p", "", "x"),
            Passage::new("q", "", "x y"),
        ])
        .unwrap();
        let vocab = build_vocab(&store, &[]);
        let mut p = params_for(&vocab, 2);
        p.embeddings.row_mut(vocab.id("x") as usize).copy_from_slice(&[1.0, 0.0]);
        assert_eq!(encode_passage(&p, &vocab, store.at(0)).unwrap(), vec![1.0, 0.0]);

        p.embeddings.row_mut(vocab.id("x") as usize).copy_from_slice(&[2.0, 0.0]);
        p.embeddings.row_mut(vocab.id("y") as usize).copy_from_slice(&[0.0, 2.0]);
        assert_eq!(encode_passage(&p, &vocab, store.at(1)).unwrap(), vec![1.0, 1.0]);

        p.embeddings.row_mut(vocab.id("x") as usize).copy_from_slice(&[3.0, 4.0]);
        assert_eq!(encode_query(&p, &vocab, "x").unwrap(), vec![3.0, 4.0]);
        p.w_query.scale(2.0);
        assert_eq!(encode_query(&p, &vocab, "x").unwrap(), vec![6.0, 8.0]);
    }

    #[test]
    fn unknown_and_empty_text_encode_to_zero() {
        let store = tiny_store();
        let vocab = build_vocab(&store, &[]);
        let p = params_for(&vocab, 4);
        assert_eq!(encode_query(&p, &vocab, "").unwrap(), vec![0.0; 4]);
        assert_eq!(encode_query(&p, &vocab, "never seen").unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn composed_query_averages_all_tokens() {
        let store = tiny_store();
        let vocab = build_vocab(&store, &[]);
        let p = params_for(&vocab, 3);
        let mean = p.mean_embedding(&[vocab.id("x"), vocab.id("x"), vocab.id("y")]);
        let expected = p.w_query.matvec(&mean);
        assert_eq!(encode_query(&p, &vocab, "x x y").unwrap(), expected);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let store = tiny_store();
        let vocab = build_vocab(&store, &[]);
        let p = EncoderParams::init(vocab.size() + 1, 2, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(encode_passage(&p, &vocab, store.at(0)), Err(Error::Dimension { .. })));
        assert!(similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn similarity_is_dot_product() {
        assert_eq!(similarity(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert_eq!(similarity(&[5.0, -7.0], &[0.0, 0.0]).unwrap(), 0.0);
        let a = [0.3, -1.2, 2.5];
        let b = [1.1, 0.4, -0.7];
        assert_eq!(similarity(&a, &b).unwrap(), similarity(&b, &a).unwrap());
    }

    #[test]
    fn closed_form_losses() {
        let store = tiny_store();
        let q = Question::new("q", "x", vec!["x".into()]);
        let vocab = build_vocab(&store, std::slice::from_ref(&q));
        let p = params_for(&vocab, 4);
        // zero negatives
        assert_eq!(nll_loss(&p, &vocab, &q, &chain(&["a", "b"]), &[], &store).unwrap(), 0.0);
        // identical step scores: passages "x" vs "x" duplicates via same text
        let dup = PassageStore::new(vec![
            Passage::new("a", "", "x"),
            Passage::new("a2", "", "x"),
            Passage::new("b", "", "y"),
            Passage::new("b2", "", "y"),
        ])
        .unwrap();
        let one = nll_loss(&p, &vocab, &q, &chain(&["a"]), &[chain(&["a2"])], &dup).unwrap();
        assert!((one - 2f64.ln()).abs() < 1e-12);
        let two = nll_loss(&p, &vocab, &q, &chain(&["a", "b"]), &[chain(&["a2", "b2"])], &dup).unwrap();
        assert!((two - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_positive_is_an_error() {
        let store = tiny_store();
        let q = Question::new("q", "x", vec!["x".into()]);
        let vocab = build_vocab(&store, &[]);
        let p = params_for(&vocab, 2);
        let err = nll_loss(&p, &vocab, &q, &chain(&[]), &[], &store);
        assert!(matches!(err, Err(Error::EmptyChain)));
    }

    #[test]
    fn zero_negative_batch_has_zero_gradient() {
        let store = tiny_store();
        let vocab = build_vocab(&store, &[]);
        let p = params_for(&vocab, 3);
        let corpus = CorpusTokens::new(&vocab, &store);
        let inst = TrainInstance {
            query: vocab.encode("x y"),
            positive: vec![0, 1],
            negatives: vec![],
        };
        let (loss, g) = nll_gradients(&p, &corpus, &[inst]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.embeddings.data.iter().all(|&v| v == 0.0));
        assert!(g.w_query.data.iter().all(|&v| v == 0.0));
        assert!(g.w_passage.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn doubling_query_projection_doubles_scores_in_loss() {
        let store = tiny_store();
        let vocab = build_vocab(&store, &[]);
        let mut p = params_for(&vocab, 3);
        let corpus = CorpusTokens::new(&vocab, &store);
        let inst = TrainInstance {
            query: vocab.encode("x"),
            positive: vec![0],
            negatives: vec![NegativeChain::full(vec![1]), NegativeChain::full(vec![2])],
        };
        let score = |p: &EncoderParams, piece: usize| {
            dot(&p.query_vector(&inst.query), &p.passage_vector(corpus.get(piece)))
        };
        let s: Vec<f64> = (0..3).map(|i| 2.0 * score(&p, i)).collect();
        let predicted = log_sum_exp(&s) - s[0];
        p.w_query.scale(2.0);
        let got = instance_loss(&p, &corpus, &inst).unwrap();
        assert!((got - predicted).abs() < 1e-12);
    }

    #[test]
    fn loss_is_positive_with_negatives_and_stable_for_large_scores() {
        let store = tiny_store();
        let vocab = build_vocab(&store, &[]);
        let mut p = params_for(&vocab, 2);
        let corpus = CorpusTokens::new(&vocab, &store);
        let inst = TrainInstance {
            query: vocab.encode("x"),
            positive: vec![1],
            negatives: vec![NegativeChain::full(vec![0])],
        };
        assert!(instance_loss(&p, &corpus, &inst).unwrap() > 0.0);
        // push similarity magnitudes toward 1e3
        p.embeddings.row_mut(vocab.id("x") as usize).copy_from_slice(&[31.0, 0.0]);
        p.embeddings.row_mut(vocab.id("y") as usize).copy_from_slice(&[-31.0, 0.0]);
        let l = instance_loss(&p, &corpus, &inst).unwrap();
        assert!(l.is_finite() && l > 900.0, "{l}");
    }

    #[test]
    fn padded_negatives_skip_missing_steps() {
        let store = tiny_store();
        let vocab = build_vocab(&store, &[]);
        let p = params_for(&vocab, 3);
        let corpus = CorpusTokens::new(&vocab, &store);
        let short = TrainInstance {
            query: vocab.encode("x"),
            positive: vec![0, 1],
            negatives: vec![NegativeChain::full(vec![2])],
        };
        let single = TrainInstance {
            query: vocab.encode("x"),
            positive: vec![0],
            negatives: vec![NegativeChain::full(vec![2])],
        };
        let alone = TrainInstance {
            query: vocab.encode("x"),
            positive: vec![0, 1],
            negatives: vec![],
        };
        let l = instance_loss(&p, &corpus, &short).unwrap();
        let l1 = instance_loss(&p, &corpus, &single).unwrap();
        assert_eq!(l, l1 + instance_loss(&p, &corpus, &alone).unwrap());
    }

    #[test]
    fn opt_step_is_deterministic() {
        let store = tiny_store();
        let vocab = build_vocab(&store, &[]);
        let corpus = CorpusTokens::new(&vocab, &store);
        let inst = TrainInstance {
            query: vocab.encode("x"),
            positive: vec![2, 0],
            negatives: vec![NegativeChain::full(vec![1, 3])],
        };
        let run = || {
            let mut p = params_for(&vocab, 4);
            let mut st = p.new_opt_state(1e-3);
            for _ in 0..5 {
                let (_, g) = nll_gradients(&p, &corpus, std::slice::from_ref(&inst)).unwrap();
                opt_step(&mut p, &g, &mut st);
            }
            p
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert_eq!(a.version, 5);
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Random instance with d ≤ 4, |V| ≤ 10, ≤ 2 negatives, n ≤ 2.
    fn random_instance(seed: u64) -> (EncoderParams, CorpusTokens, Vec<TrainInstance>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words = ["ab", "cd", "ef", "gh", "ij", "kl", "mn", "op", "qr"];
        let passages: Vec<Passage> = (0..6)
            .map(|i| {
                let k = rng.gen_range(1..4);
                let text: Vec<&str> = (0..k).map(|_| words[rng.gen_range(0..words.len())]).collect();
                Passage::new(format!("p{i}"), "", text.join(" "))
            })
            .collect();
        let store = PassageStore::new(passages).unwrap();
        let vocab = Vocabulary::from_tokens(words);
        let dim = rng.gen_range(2..=4);
        let mut p = EncoderParams::init(vocab.size(), dim, &mut rng);
        for v in p.embeddings.data.iter_mut().skip(dim) {
            *v = rng.gen_range(-1.0..1.0);
        }
        for v in p.w_query.data.iter_mut().chain(p.w_passage.data.iter_mut()) {
            *v += rng.gen_range(-0.5..0.5);
        }
        let n = rng.gen_range(1..=2);
        let negs = rng.gen_range(0..=2);
        let batch = (0..2)
            .map(|_| {
                let mut order: Vec<usize> = (0..6).collect();
                rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
                TrainInstance {
                    query: vocab.encode(&format!("{} {}", words[rng.gen_range(0..9)], words[rng.gen_range(0..9)])),
                    positive: order[..n].to_vec(),
                    negatives: (0..negs)
                        .map(|j| {
                            let start = n + j * n;
                            let mut c = order[start..start + n].to_vec();
                            if j == 1 && n == 2 {
                                c.truncate(1);
                            }
                            NegativeChain::full(c)
                        })
                        .collect(),
                }
            })
            .collect();
        (p, CorpusTokens::new(&vocab, &store), batch)
    }

    fn batch_loss(p: &EncoderParams, corpus: &CorpusTokens, batch: &[TrainInstance]) -> f64 {
        batch.iter().map(|i| instance_loss(p, corpus, i).unwrap()).sum::<f64>() / batch.len() as f64
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..8 {
            let (p, corpus, batch) = random_instance(seed);
            let (loss, g) = nll_gradients(&p, &corpus, &batch).unwrap();
            assert!((loss - batch_loss(&p, &corpus, &batch)).abs() < 1e-12);
            let h = 1e-5;
            let blocks: [(&str, fn(&mut EncoderParams) -> &mut Vec<f64>, &Vec<f64>); 3] = [
                ("embeddings", |p| &mut p.embeddings.data, &g.embeddings.data),
                ("w_query", |p| &mut p.w_query.data, &g.w_query.data),
                ("w_passage", |p| &mut p.w_passage.data, &g.w_passage.data),
            ];
            for (name, get, analytic) in blocks {
                // row 0 (UNK) is frozen by construction
                let skip = if name == "embeddings" { p.dim } else { 0 };
                for i in skip..analytic.len() {
                    let mut q = p.clone();
                    get(&mut q)[i] += h;
                    let up = batch_loss(&q, &corpus, &batch);
                    get(&mut q)[i] -= 2.0 * h;
                    let down = batch_loss(&q, &corpus, &batch);
                    let fd = (up - down) / (2.0 * h);
                    assert!(
                        rel_err(fd, analytic[i]) < 1e-4 || (fd - analytic[i]).abs() < 1e-10,
                        "seed {seed} {name}[{i}]: fd {fd} vs {}",
                        analytic[i]
                    );
                }
            }
        }
    }

    #[test]
    fn raising_the_positive_score_lowers_the_loss() {
        let store = tiny_store();
        let vocab = build_vocab(&store, &[]);
        let mut p = params_for(&vocab, 2);
        let corpus = CorpusTokens::new(&vocab, &store);
        p.embeddings.row_mut(vocab.id("x") as usize).copy_from_slice(&[1.0, 0.0]);
        p.embeddings.row_mut(vocab.id("y") as usize).copy_from_slice(&[0.0, 1.0]);
        let inst = TrainInstance {
            query: vocab.encode("x"),
            positive: vec![0],
            negatives: vec![NegativeChain::full(vec![1])],
        };
        let mut last = f64::INFINITY;
        for k in 0..6 {
            // only passage "a" (token x) moves, so only the positive score grows
            p.w_passage.set(0, 0, 1.0 + k as f64);
            let l = instance_loss(&p, &corpus, &inst).unwrap();
            assert!(l < last);
            last = l;
        }
    }
}
