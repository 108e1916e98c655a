//! Reader: chain reranking and span extraction over a question plus an
//! evidence chain, with a feature-interaction token encoder.
//!
//! Each token of `CLS question title_1 evi_1 ... title_n evi_n` becomes
//! `u_t = tanh(W_int [e_t; q̄; e_t ⊙ q̄])`, where `q̄` is the mean question
//! embedding and the CLS position uses `e = q̄`. The chain representation is
//! the mean of all `u_t`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{tokenize_with_offsets, Passage, PassageStore, Question, Vocabulary, UNK_ID};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::harness::normalize_answer;
use crate::linalg::{axpy, dot, log_sum_exp, softmax, Matrix};
use crate::optim::OptState;
use crate::retriever::EvidenceChain;

pub const DEFAULT_MAX_SPAN_LEN: usize = 10;

fn default_max_span_len() -> usize {
    DEFAULT_MAX_SPAN_LEN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderParams {
    pub dim: usize,
    /// The reader's own token table, `|V|+1` rows.
    pub embeddings: Matrix,
    /// `d × 3d`
    pub w_int: Matrix,
    pub w_rank: Vec<f64>,
    pub w_start: Vec<f64>,
    pub w_end: Vec<f64>,
    #[serde(default = "default_max_span_len")]
    pub max_span_len: usize,
}

impl ReaderParams {
    pub fn init<R: Rng>(vocab_size: usize, dim: usize, rng: &mut R) -> Self {
        let bound = 0.5 / dim as f64;
        let mut embeddings = Matrix::zeros(vocab_size, dim);
        for v in embeddings.data.iter_mut().skip(dim) {
            *v = rng.gen_range(-bound..bound);
        }
        Self::with_embeddings(embeddings, rng)
    }

    /// Fresh reader weights over a copy of the encoder's token table.
    pub fn from_encoder<R: Rng>(encoder: &EncoderParams, rng: &mut R) -> Self {
        Self::with_embeddings(encoder.embeddings.clone(), rng)
    }

    fn with_embeddings<R: Rng>(embeddings: Matrix, rng: &mut R) -> Self {
        let dim = embeddings.cols;
        let xavier = (6.0 / (4 * dim) as f64).sqrt();
        let mut w_int = Matrix::zeros(dim, 3 * dim);
        w_int.data.iter_mut().for_each(|v| *v = rng.gen_range(-xavier..xavier));
        let b = 1.0 / (dim as f64).sqrt();
        let vec = |rng: &mut R| (0..dim).map(|_| rng.gen_range(-b..b)).collect::<Vec<f64>>();
        let w_rank = vec(rng);
        let w_start = vec(rng);
        let w_end = vec(rng);
        Self {
            dim,
            embeddings,
            w_int,
            w_rank,
            w_start,
            w_end,
            max_span_len: DEFAULT_MAX_SPAN_LEN,
        }
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
        self.embeddings.is_finite()
            && self.w_int.is_finite()
            && [&self.w_rank, &self.w_start, &self.w_end]
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn block_sizes(&self) -> [usize; 5] {
        [
            self.embeddings.data.len(),
            self.w_int.data.len(),
            self.dim,
            self.dim,
            self.dim,
        ]
    }

    pub fn new_opt_state(&self, lr: f64) -> OptState {
        OptState::new(lr, &self.block_sizes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Cls,
    Question,
    Title(usize),
    Evidence(usize),
}

/// Where a sequence position came from; `start..end` are byte offsets into
/// the question text or the piece's title/text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenOrigin {
    pub segment: Segment,
    pub start: usize,
    pub end: usize,
}

/// Tokenized reader input for one (question, chain) pair; independent of
/// parameters, so it can be built once and reused across epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReaderInput {
    question: Vec<u32>,
    /// Token id per position; the CLS slot holds `UNK_ID` and is never read.
    tokens: Vec<u32>,
    origin: Vec<TokenOrigin>,
    evidence: Vec<String>,
}

impl ReaderInput {
    pub fn new(vocab: &Vocabulary, question: &Question, pieces: &[&Passage]) -> Result<Self> {
        if pieces.is_empty() {
            return Err(Error::EmptyChain);
        }
        let mut tokens = vec![UNK_ID];
        let mut origin = vec![TokenOrigin {
            segment: Segment::Cls,
            start: 0,
            end: 0,
        }];
        let mut push = |segment: Segment, text: &str, tokens: &mut Vec<u32>| {
            for t in tokenize_with_offsets(text) {
                tokens.push(vocab.id(&t.text));
                origin.push(TokenOrigin {
                    segment,
                    start: t.start,
                    end: t.end,
                });
            }
        };
        push(Segment::Question, &question.text, &mut tokens);
        let question_ids = tokens[1..].to_vec();
        for (i, p) in pieces.iter().enumerate() {
            push(Segment::Title(i), &p.title, &mut tokens);
            push(Segment::Evidence(i), &p.text, &mut tokens);
        }
        Ok(Self {
            question: question_ids,
            tokens,
            origin,
            evidence: pieces.iter().map(|p| p.text.clone()).collect(),
        })
    }

    pub fn from_chain(vocab: &Vocabulary, store: &PassageStore, question: &Question, chain: &EvidenceChain) -> Result<Self> {
        let pieces = store.resolve(&chain.piece_ids)?;
        Self::new(vocab, question, &pieces)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn origin(&self) -> &[TokenOrigin] {
        &self.origin
    }

    /// Evidence piece of a span, if both ends lie in the same evidence region.
    fn span_piece(&self, s: usize, e: usize) -> Option<usize> {
        match (self.origin[s].segment, self.origin[e].segment) {
            (Segment::Evidence(a), Segment::Evidence(b)) if a == b => Some(a),
            _ => None,
        }
    }

    pub fn span_text(&self, s: usize, e: usize) -> Option<&str> {
        let piece = self.span_piece(s, e)?;
        Some(&self.evidence[piece][self.origin[s].start..self.origin[e].end])
    }

    /// Valid `(start, end)` spans: one evidence region, `end − start < max_len`.
    pub fn valid_spans(&self, max_len: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.len()).flat_map(move |s| {
            (s..self.len().min(s + max_len))
                .take_while(move |&e| self.span_piece(s, e).is_some())
                .map(move |e| (s, e))
        })
    }

    pub fn evidence_token_count(&self) -> usize {
        self.origin
            .iter()
            .filter(|o| matches!(o.segment, Segment::Evidence(_)))
            .count()
    }
}

/// Spans whose normalized source text equals some normalized answer.
pub fn answer_occurrences(input: &ReaderInput, answers: &[String], max_len: usize) -> Vec<(usize, usize)> {
    let targets: Vec<String> = answers
        .iter()
        .map(|a| normalize_answer(a))
        .filter(|a| !a.is_empty())
        .collect();
    if targets.is_empty() {
        return Vec::new();
    }
    input
        .valid_spans(max_len)
        .filter(|&(s, e)| {
            let text = normalize_answer(input.span_text(s, e).unwrap());
            targets.iter().any(|t| *t == text)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointEncoding {
    /// `L × d`
    pub u: Matrix,
    pub cls_vec: Vec<f64>,
    pub token_origin: Vec<TokenOrigin>,
    qbar: Vec<f64>,
}

impl JointEncoding {
    pub fn len(&self) -> usize {
        self.u.rows
    }

    pub fn is_empty(&self) -> bool {
        self.u.rows == 0
    }
}

fn mean_rows(m: &Matrix, ids: &[u32]) -> Vec<f64> {
    let mut out = vec![0.0; m.cols];
    if ids.is_empty() {
        return out;
    }
    for &t in ids {
        axpy(1.0, m.row(t as usize), &mut out);
    }
    let inv = 1.0 / ids.len() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

fn features(e: &[f64], qbar: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(3 * e.len());
    x.extend_from_slice(e);
    x.extend_from_slice(qbar);
    x.extend(e.iter().zip(qbar).map(|(a, b)| a * b));
    x
}

fn token_embedding<'a>(rp: &'a ReaderParams, input: &ReaderInput, t: usize, qbar: &'a [f64]) -> &'a [f64] {
    if t == 0 {
        qbar
    } else {
        rp.embeddings.row(input.tokens[t] as usize)
    }
}

pub fn encode_input(rp: &ReaderParams, input: &ReaderInput) -> JointEncoding {
    let qbar = mean_rows(&rp.embeddings, &input.question);
    let mut u = Matrix::zeros(input.len(), rp.dim);
    let mut cls_vec = vec![0.0; rp.dim];
    for t in 0..input.len() {
        let x = features(token_embedding(rp, input, t, &qbar), &qbar);
        let row = u.row_mut(t);
        for (i, r) in row.iter_mut().enumerate() {
            *r = dot(rp.w_int.row(i), &x).tanh();
        }
        axpy(1.0, row, &mut cls_vec);
    }
    let inv = 1.0 / input.len() as f64;
    cls_vec.iter_mut().for_each(|v| *v *= inv);
    JointEncoding {
        u,
        cls_vec,
        token_origin: input.origin.clone(),
        qbar,
    }
}

pub fn encode_joint(rp: &ReaderParams, vocab: &Vocabulary, question: &Question, pieces: &[&Passage]) -> Result<JointEncoding> {
    rp.check_vocab(vocab)?;
    Ok(encode_input(rp, &ReaderInput::new(vocab, question, pieces)?))
}

fn rank_logit(rp: &ReaderParams, enc: &JointEncoding) -> f64 {
    dot(&enc.cls_vec, &rp.w_rank)
}

/// `P(z | q)` across the given chains.
pub fn rerank(rp: &ReaderParams, vocab: &Vocabulary, question: &Question, chains: &[Vec<&Passage>]) -> Result<Vec<f64>> {
    if chains.is_empty() {
        return Err(Error::NoChains);
    }
    rp.check_vocab(vocab)?;
    let logits = chains
        .iter()
        .map(|c| Ok(rank_logit(rp, &encode_joint(rp, vocab, question, c)?)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(softmax(&logits))
}

/// Start and end distributions over all `L` positions.
pub fn span_scores(rp: &ReaderParams, enc: &JointEncoding) -> (Vec<f64>, Vec<f64>) {
    let (ls, le) = span_logits(rp, enc);
    (softmax(&ls), softmax(&le))
}

fn span_logits(rp: &ReaderParams, enc: &JointEncoding) -> (Vec<f64>, Vec<f64>) {
    (enc.u.matvec(&rp.w_start), enc.u.matvec(&rp.w_end))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub chain_index: usize,
    pub start: usize,
    pub end: usize,
    pub answer_text: String,
    pub span_prob: f64,
    pub rerank_prob: f64,
}

/// Highest-`P(start)·P(end)` valid span of one encoded input.
pub fn best_span(rp: &ReaderParams, input: &ReaderInput, enc: &JointEncoding) -> Result<(usize, usize, f64)> {
    let (ps, pe) = span_scores(rp, enc);
    let mut best: Option<(usize, usize, f64)> = None;
    // Spans are visited by increasing start, then increasing end, so a strict
    // comparison keeps the earlier start and then the shorter span on ties.
    for (s, e) in input.valid_spans(rp.max_span_len) {
        let p = ps[s] * pe[e];
        if best.is_none_or(|b| p > b.2) {
            best = Some((s, e, p));
        }
    }
    best.ok_or(Error::NoEvidenceTokens)
}

/// Picks the best-reranked chain (lowest index on ties), then its best span.
pub fn predict_inputs(rp: &ReaderParams, inputs: &[ReaderInput]) -> Result<SpanPrediction> {
    if inputs.is_empty() {
        return Err(Error::NoChains);
    }
    let encs: Vec<JointEncoding> = inputs.iter().map(|i| encode_input(rp, i)).collect();
    let logits: Vec<f64> = encs.iter().map(|e| rank_logit(rp, e)).collect();
    let probs = softmax(&logits);
    let mut chain = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[chain] {
            chain = i;
        }
    }
    let (start, end, span_prob) = best_span(rp, &inputs[chain], &encs[chain])?;
    Ok(SpanPrediction {
        chain_index: chain,
        start,
        end,
        answer_text: inputs[chain].span_text(start, end).unwrap().to_string(),
        span_prob,
        rerank_prob: probs[chain],
    })
}

pub fn predict_answer(rp: &ReaderParams, vocab: &Vocabulary, question: &Question, chains: &[Vec<&Passage>]) -> Result<SpanPrediction> {
    rp.check_vocab(vocab)?;
    let inputs = chains
        .iter()
        .map(|c| ReaderInput::new(vocab, question, c))
        .collect::<Result<Vec<_>>>()?;
    predict_inputs(rp, &inputs)
}

/// A reader training instance; chain 0 is the positive.
#[derive(Debug, Clone, PartialEq)]
pub struct ReaderExample {
    pub chains: Vec<ReaderInput>,
    pub occurrences: Vec<(usize, usize)>,
}

impl ReaderExample {
    pub fn new(positive: ReaderInput, negatives: Vec<ReaderInput>, answers: &[String], max_span_len: usize) -> Result<Self> {
        let occurrences = answer_occurrences(&positive, answers, max_span_len);
        if occurrences.is_empty() {
            return Err(Error::NoAnswerOccurrence);
        }
        let mut chains = vec![positive];
        chains.extend(negatives);
        Ok(Self { chains, occurrences })
    }
}

/// `−log P(positive) − log Σ_occ P_start[s]·P_end[e]`.
#[allow(clippy::too_many_arguments)]
pub fn reader_loss(
    rp: &ReaderParams,
    vocab: &Vocabulary,
    store: &PassageStore,
    question: &Question,
    positive: &EvidenceChain,
    negatives: &[EvidenceChain],
    answers: &[String],
) -> Result<f64> {
    rp.check_vocab(vocab)?;
    let pos = ReaderInput::from_chain(vocab, store, question, positive)?;
    let negs = negatives
        .iter()
        .map(|c| ReaderInput::from_chain(vocab, store, question, c))
        .collect::<Result<Vec<_>>>()?;
    example_loss(rp, &ReaderExample::new(pos, negs, answers, rp.max_span_len)?)
}

pub fn example_loss(rp: &ReaderParams, ex: &ReaderExample) -> Result<f64> {
    let encs: Vec<JointEncoding> = ex.chains.iter().map(|i| encode_input(rp, i)).collect();
    let logits: Vec<f64> = encs.iter().map(|e| rank_logit(rp, e)).collect();
    let (ls, le) = span_logits(rp, &encs[0]);
    let (ls_lse, le_lse) = (log_sum_exp(&ls), log_sum_exp(&le));
    let occ: Vec<f64> = ex
        .occurrences
        .iter()
        .map(|&(s, e)| ls[s] - ls_lse + le[e] - le_lse)
        .collect();
    let loss = log_sum_exp(&logits) - logits[0] - log_sum_exp(&occ);
    if !loss.is_finite() {
        return Err(Error::NonFinite("reader loss".into()));
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReaderGrads {
    pub embeddings: Matrix,
    pub w_int: Matrix,
    pub w_rank: Vec<f64>,
    pub w_start: Vec<f64>,
    pub w_end: Vec<f64>,
}

impl ReaderGrads {
    pub fn zeros_like(rp: &ReaderParams) -> Self {
        Self {
            embeddings: Matrix::zeros(rp.embeddings.rows, rp.embeddings.cols),
            w_int: Matrix::zeros(rp.w_int.rows, rp.w_int.cols),
            w_rank: vec![0.0; rp.dim],
            w_start: vec![0.0; rp.dim],
            w_end: vec![0.0; rp.dim],
        }
    }

    fn add(&mut self, other: &ReaderGrads) {
        axpy(1.0, &other.embeddings.data, &mut self.embeddings.data);
        axpy(1.0, &other.w_int.data, &mut self.w_int.data);
        axpy(1.0, &other.w_rank, &mut self.w_rank);
        axpy(1.0, &other.w_start, &mut self.w_start);
        axpy(1.0, &other.w_end, &mut self.w_end);
    }

    fn check_finite(&self) -> Result<()> {
        let blocks: [(&str, &[f64]); 5] = [
            ("embeddings", &self.embeddings.data),
            ("w_int", &self.w_int.data),
            ("w_rank", &self.w_rank),
            ("w_start", &self.w_start),
            ("w_end", &self.w_end),
        ];
        for (name, b) in blocks {
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("reader gradient block `{name}`")));
            }
        }
        Ok(())
    }
}

/// Adds `scale · ∂loss/∂θ` for one example into `g`; returns the loss.
fn accumulate(rp: &ReaderParams, ex: &ReaderExample, scale: f64, g: &mut ReaderGrads) -> f64 {
    let encs: Vec<JointEncoding> = ex.chains.iter().map(|i| encode_input(rp, i)).collect();
    let logits: Vec<f64> = encs.iter().map(|e| rank_logit(rp, e)).collect();
    let probs = softmax(&logits);
    let (ls, le) = span_logits(rp, &encs[0]);
    let (ps, pe) = (softmax(&ls), softmax(&le));
    let (ls_lse, le_lse) = (log_sum_exp(&ls), log_sum_exp(&le));
    let occ: Vec<f64> = ex
        .occurrences
        .iter()
        .map(|&(s, e)| ls[s] - ls_lse + le[e] - le_lse)
        .collect();
    let occ_lse = log_sum_exp(&occ);
    let loss = log_sum_exp(&logits) - logits[0] - occ_lse;

    for (c, (input, enc)) in ex.chains.iter().zip(&encs).enumerate() {
        let mut dr = probs[c];
        if c == 0 {
            dr -= 1.0;
        }
        dr *= scale;
        axpy(dr, &enc.cls_vec, &mut g.w_rank);
        let mut du = Matrix::zeros(enc.u.rows, rp.dim);
        let per_token = dr / enc.u.rows as f64;
        for t in 0..enc.u.rows {
            axpy(per_token, &rp.w_rank, du.row_mut(t));
        }
        if c == 0 {
            let mut dls: Vec<f64> = ps.iter().map(|p| p * scale).collect();
            let mut dle: Vec<f64> = pe.iter().map(|p| p * scale).collect();
            for (&(s, e), &lp) in ex.occurrences.iter().zip(&occ) {
                let w = (lp - occ_lse).exp() * scale;
                dls[s] -= w;
                dle[e] -= w;
            }
            for t in 0..enc.u.rows {
                axpy(dls[t], enc.u.row(t), &mut g.w_start);
                axpy(dle[t], enc.u.row(t), &mut g.w_end);
                let row = du.row_mut(t);
                axpy(dls[t], &rp.w_start, row);
                axpy(dle[t], &rp.w_end, row);
            }
        }
        backward(rp, input, enc, &du, g);
    }
    loss
}

fn backward(rp: &ReaderParams, input: &ReaderInput, enc: &JointEncoding, du: &Matrix, g: &mut ReaderGrads) {
    let d = rp.dim;
    let qbar = &enc.qbar;
    let mut dqbar = vec![0.0; d];
    for t in 0..enc.u.rows {
        let u = enc.u.row(t);
        let dh: Vec<f64> = du.row(t).iter().zip(u).map(|(g, u)| g * (1.0 - u * u)).collect();
        if dh.iter().all(|&v| v == 0.0) {
            continue;
        }
        let e = token_embedding(rp, input, t, qbar);
        let x = features(e, qbar);
        g.w_int.add_outer(1.0, &dh, &x);
        let dx = rp.w_int.matvec_t(&dh);
        let (a, rest) = dx.split_at(d);
        let (b, c) = rest.split_at(d);
        if t == 0 {
            for k in 0..d {
                dqbar[k] += a[k] + b[k] + 2.0 * c[k] * qbar[k];
            }
        } else {
            for k in 0..d {
                dqbar[k] += b[k] + c[k] * e[k];
            }
            let tok = input.tokens[t];
            if tok != UNK_ID {
                let row = g.embeddings.row_mut(tok as usize);
                for k in 0..d {
                    row[k] += a[k] + c[k] * qbar[k];
                }
            }
        }
    }
    if input.question.is_empty() {
        return;
    }
    let inv = 1.0 / input.question.len() as f64;
    for &tok in &input.question {
        if tok != UNK_ID {
            axpy(inv, &dqbar, g.embeddings.row_mut(tok as usize));
        }
    }
}

/// Mean loss over `batch` and its gradient. Examples are processed in
/// parallel and reduced in batch order.
pub fn reader_gradients(rp: &ReaderParams, batch: &[ReaderExample]) -> Result<(f64, ReaderGrads)> {
    if batch.is_empty() {
        return Err(Error::NoExamples("empty reader batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let parts: Vec<(f64, ReaderGrads)> = batch
        .par_iter()
        .map(|ex| {
            let mut g = ReaderGrads::zeros_like(rp);
            let loss = accumulate(rp, ex, scale, &mut g);
            (loss, g)
        })
        .collect();
    let mut total = ReaderGrads::zeros_like(rp);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += scale * l;
        total.add(g);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("reader loss".into()));
    }
    total.check_finite()?;
    Ok((loss, total))
}

pub fn reader_step(rp: &mut ReaderParams, grads: &ReaderGrads, state: &mut OptState) {
    state.apply(
        &mut [
            &mut rp.embeddings.data[..],
            &mut rp.w_int.data[..],
            &mut rp.w_rank[..],
            &mut rp.w_start[..],
            &mut rp.w_end[..],
        ],
        &[
            &grads.embeddings.data,
            &grads.w_int.data,
            &grads.w_rank,
            &grads.w_start,
            &grads.w_end,
        ],
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_vocab;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (PassageStore, Question, Vocabulary) {
        let store = PassageStore::new(vec![
            Passage::new("a", "Kel Ra", "Kel Ra, who writes long fiction, is employed by Rutgers University."),
            Passage::new("b", "Rutgers University", "Rutgers University is based in Tovan."),
            Passage::new("c", "Kel Ra tour", "In 1990, Kel Ra toured Mesk, Tovan and Purl."),
        ])
        .unwrap();
        let q = Question::new("q", "Which city hosts the employer of the novelist Kel Ra?", vec!["Tovan".into()]);
        let vocab = build_vocab(&store, std::slice::from_ref(&q));
        (store, q, vocab)
    }

    fn reader(vocab: &Vocabulary, dim: usize, seed: u64) -> ReaderParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rp = ReaderParams::init(vocab.size(), dim, &mut rng);
        rp.embeddings.data.iter_mut().skip(dim).for_each(|v| *v = rng.gen_range(-1.0..1.0));
        rp
    }

    #[test]
    fn zero_interaction_gives_zero_encoding() {
        let store = PassageStore::new(vec![Passage::new("p", "", "x")]).unwrap();
        let q = Question::new("q", "y", vec!["x".into()]);
        let vocab = build_vocab(&store, std::slice::from_ref(&q));
        let mut rp = reader(&vocab, 3, 0);
        rp.w_int.fill(0.0);
        let enc = encode_joint(&rp, &vocab, &q, &[store.at(0)]).unwrap();
        assert!(enc.u.data.iter().all(|&v| v == 0.0));
        assert_eq!(enc.cls_vec, vec![0.0; 3]);
        assert_eq!(enc.len(), 1 + 1 + 1);
    }

    #[test]
    fn offsets_reconstruct_source_text() {
        let store = PassageStore::new(vec![Passage::new("p", "T", "Founded at Rutgers University, 1766.")]).unwrap();
        let q = Question::new("q", "where", vec!["x".into()]);
        let vocab = build_vocab(&store, std::slice::from_ref(&q));
        let input = ReaderInput::new(&vocab, &q, &[store.at(0)]).unwrap();
        let s = input
            .origin()
            .iter()
            .position(|o| o.segment == Segment::Evidence(0) && o.start == 11)
            .unwrap();
        assert_eq!(input.span_text(s, s + 1), Some("Rutgers University"));
        // spans crossing into the title region are invalid
        assert_eq!(input.span_text(s - 3, s), None);
    }

    #[test]
    fn rerank_singletons_and_symmetry() {
        let (store, q, vocab) = fixture();
        let rp = reader(&vocab, 4, 1);
        let a = vec![store.at(0), store.at(1)];
        assert_eq!(rerank(&rp, &vocab, &q, std::slice::from_ref(&a)).unwrap(), vec![1.0]);
        let p = rerank(&rp, &vocab, &q, &[a.clone(), a.clone()]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        assert!(rerank(&rp, &vocab, &q, &[]).is_err());
        let p = softmax(&[2f64.ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12 && (p[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn span_distributions() {
        let (store, q, vocab) = fixture();
        let mut rp = reader(&vocab, 4, 2);
        let enc = encode_joint(&rp, &vocab, &q, &[store.at(1)]).unwrap();
        let (ps, pe) = span_scores(&rp, &enc);
        assert!((ps.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((pe.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        rp.w_start.iter_mut().for_each(|v| *v = 0.0);
        let (ps, _) = span_scores(&rp, &enc);
        assert!(ps.iter().all(|&p| (p - 1.0 / enc.len() as f64).abs() < 1e-15));
        let logits = enc.u.matvec(&rp.w_end);
        let shifted: Vec<f64> = logits.iter().map(|l| l + 7.5).collect();
        for (a, b) in softmax(&logits).iter().zip(softmax(&shifted)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_matches_exhaustive_search() {
        let (store, q, vocab) = fixture();
        for seed in 0..20 {
            let rp = reader(&vocab, 4, seed);
            let chains = vec![vec![store.at(0), store.at(1)], vec![store.at(0), store.at(2)]];
            let pred = predict_answer(&rp, &vocab, &q, &chains).unwrap();
            let probs = rerank(&rp, &vocab, &q, &chains).unwrap();
            let chain = if probs[1] > probs[0] { 1 } else { 0 };
            assert_eq!(pred.chain_index, chain);
            let input = ReaderInput::new(&vocab, &q, &chains[chain]).unwrap();
            let enc = encode_input(&rp, &input);
            let (ps, pe) = span_scores(&rp, &enc);
            let mut best = (0, 0, -1.0);
            for s in 0..input.len() {
                for e in s..input.len() {
                    let ok = e - s < 10
                        && matches!((input.origin()[s].segment, input.origin()[e].segment),
                            (Segment::Evidence(a), Segment::Evidence(b)) if a == b);
                    if ok && ps[s] * pe[e] > best.2 {
                        best = (s, e, ps[s] * pe[e]);
                    }
                }
            }
            assert_eq!((pred.start, pred.end), (best.0, best.1));
            assert_eq!(pred.span_prob, best.2);
        }
    }

    #[test]
    fn hand_set_logits_pick_their_span() {
        let (store, q, vocab) = fixture();
        let mut rp = reader(&vocab, 4, 3);
        let input = ReaderInput::new(&vocab, &q, &[store.at(1)]).unwrap();
        // make u_t one-hot-ish by token: tanh(W e) with W reading e[0]
        let target = input
            .origin()
            .iter()
            .position(|o| o.segment == Segment::Evidence(0) && o.start == 31)
            .unwrap();
        rp.w_int.fill(0.0);
        rp.w_int.set(0, 0, 5.0);
        rp.embeddings.data.iter_mut().for_each(|v| *v = 0.0);
        rp.embeddings.set(input.tokens[target] as usize, 0, 1.0);
        rp.w_start = vec![10.0, 0.0, 0.0, 0.0];
        rp.w_end = vec![10.0, 0.0, 0.0, 0.0];
        let pred = predict_inputs(&rp, &[input]).unwrap();
        assert_eq!(pred.answer_text, "Tovan");
        assert_eq!((pred.start, pred.end), (target, target));
    }

    #[test]
    fn loss_terms_in_closed_form() {
        let (store, q, vocab) = fixture();
        let mut rp = reader(&vocab, 4, 4);
        rp.w_start.iter_mut().for_each(|v| *v = 0.0);
        rp.w_end.iter_mut().for_each(|v| *v = 0.0);
        let pos = ReaderInput::new(&vocab, &q, &[store.at(1)]).unwrap();
        let l = pos.len() as f64;
        let ex = ReaderExample::new(pos.clone(), vec![], &q.answers, 10).unwrap();
        let got = example_loss(&rp, &ex).unwrap();
        assert!((got - 2.0 * l.ln()).abs() < 1e-12);

        let twice = Passage::new("t", "", "Tovan or tovan");
        let input = ReaderInput::new(&vocab, &q, &[&twice]).unwrap();
        let l = input.len() as f64;
        let ex = ReaderExample::new(input, vec![], &q.answers, 10).unwrap();
        assert_eq!(ex.occurrences.len(), 2);
        let got = example_loss(&rp, &ex).unwrap();
        assert!((got - -(2.0 / (l * l)).ln()).abs() < 1e-12);

        let none = ReaderInput::new(&vocab, &q, &[store.at(0)]).unwrap();
        assert!(matches!(
            ReaderExample::new(none, vec![], &q.answers, 10),
            Err(Error::NoAnswerOccurrence)
        ));
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (store, q, vocab) = fixture();
        for seed in 0..5 {
            let rp = reader(&vocab, 4, 10 + seed);
            let ex = ReaderExample::new(
                ReaderInput::new(&vocab, &q, &[store.at(0), store.at(1)]).unwrap(),
                vec![ReaderInput::new(&vocab, &q, &[store.at(0), store.at(2)]).unwrap()],
                &q.answers,
                10,
            )
            .unwrap();
            let (_, g) = reader_gradients(&rp, std::slice::from_ref(&ex)).unwrap();
            let h = 1e-5;
            let check = |get: &dyn Fn(&mut ReaderParams) -> &mut f64, analytic: f64| {
                let mut p = rp.clone();
                *get(&mut p) += h;
                let up = example_loss(&p, &ex).unwrap();
                *get(&mut p) -= 2.0 * h;
                let down = example_loss(&p, &ex).unwrap();
                let fd = (up - down) / (2.0 * h);
                assert!(rel_err(fd, analytic) < 1e-4 || (fd - analytic).abs() < 1e-9, "fd {fd} vs {analytic}");
            };
            for i in 0..rp.w_int.data.len() {
                check(&|p| &mut p.w_int.data[i], g.w_int.data[i]);
            }
            for i in 0..rp.embeddings.data.len() {
                check(&|p| &mut p.embeddings.data[i], g.embeddings.data[i]);
            }
            for i in 0..4 {
                check(&|p| &mut p.w_rank[i], g.w_rank[i]);
                check(&|p| &mut p.w_start[i], g.w_start[i]);
                check(&|p| &mut p.w_end[i], g.w_end[i]);
            }
        }
    }

    #[test]
    fn descent_reduces_loss() {
        let (store, q, vocab) = fixture();
        let mut rp = reader(&vocab, 4, 5);
        let ex = ReaderExample::new(
            ReaderInput::new(&vocab, &q, &[store.at(0), store.at(1)]).unwrap(),
            vec![ReaderInput::new(&vocab, &q, &[store.at(0), store.at(2)]).unwrap()],
            &q.answers,
            10,
        )
        .unwrap();
        let mut st = rp.new_opt_state(1e-3);
        let mut last = example_loss(&rp, &ex).unwrap();
        for _ in 0..10 {
            let (_, g) = reader_gradients(&rp, std::slice::from_ref(&ex)).unwrap();
            reader_step(&mut rp, &g, &mut st);
            let now = example_loss(&rp, &ex).unwrap();
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn boosting_rank_alignment_helps_that_chain() {
        let (store, q, vocab) = fixture();
        let rp = reader(&vocab, 4, 6);
        let chains = vec![
            vec![store.at(0), store.at(1)],
            vec![store.at(0), store.at(2)],
            vec![store.at(1), store.at(2)],
        ];
        let before = rerank(&rp, &vocab, &q, &chains).unwrap();
        let enc = encode_joint(&rp, &vocab, &q, &chains[0]).unwrap();
        let mut boosted = rp.clone();
        axpy(0.5, &enc.cls_vec, &mut boosted.w_rank);
        let after = rerank(&boosted, &vocab, &q, &chains).unwrap();
        assert!(after[0] >= before[0]);
    }
}
