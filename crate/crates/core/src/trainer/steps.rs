use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    answer_match, answer_match_passage, fresh_reader, reader_filter_input, retrieval_config, stage_rng, EmConfig,
    EmState, FilterMode, PositiveSelection, TrainExample, Workspace,
};
use crate::data::Question;
use crate::encoder::{nll_gradients, opt_step, positions, EncoderParams, NegativeChain, TrainInstance};
use crate::error::{Error, Result};
use crate::index::refresh_index_with;
use crate::reader::{reader_gradients, reader_step, ReaderExample, ReaderInput};
use crate::retriever::{beam_search, retrieve_all, EvidenceChain};

/// Encoder supervision in store positions.
#[derive(Debug, Clone)]
struct EncItem {
    query: Vec<u32>,
    positive: Vec<usize>,
    negatives: Vec<Vec<usize>>,
}

/// Steps before which a negative coincides with the positive are not
/// negatives at all, so the chain only counts from its first divergence.
fn diverging(negative: Vec<usize>, positive: &[usize]) -> NegativeChain {
    let shared = negative
        .iter()
        .zip(positive)
        .take_while(|(a, b)| a == b)
        .count();
    NegativeChain {
        pieces: negative,
        first_step: shared,
    }
}

fn batch_instances(items: &[&EncItem], in_batch: bool) -> Vec<TrainInstance> {
    items
        .iter()
        .map(|item| {
            let mut negatives: Vec<NegativeChain> = item
                .negatives
                .iter()
                .map(|n| diverging(n.clone(), &item.positive))
                .filter(|n| n.first_step < n.pieces.len())
                .collect();
            if in_batch {
                let mut seen: Vec<(usize, usize)> = Vec::new();
                // Every piece of every positive in the batch competes at every
                // step. For the item itself this means its later pieces are
                // negatives at earlier steps.
                for other in items {
                    for t in 0..item.positive.len() {
                        for &piece in &other.positive {
                            if item.positive[..=t].contains(&piece) || seen.contains(&(t, piece)) {
                                continue;
                            }
                            seen.push((t, piece));
                            let mut pieces = item.positive[..t].to_vec();
                            pieces.push(piece);
                            negatives.push(NegativeChain { pieces, first_step: t });
                        }
                    }
                }
            }
            TrainInstance {
                query: item.query.clone(),
                positive: item.positive.clone(),
                negatives,
            }
        })
        .collect()
}

fn train_encoder_epoch(
    encoder: &mut EncoderParams,
    opt: &mut crate::optim::OptState,
    ws: &Workspace,
    items: &[EncItem],
    cfg: &EmConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<&EncItem> = chunk.iter().map(|&i| &items[i]).collect();
        let instances = batch_instances(&batch, cfg.in_batch_negatives);
        let (loss, grads) = nll_gradients(encoder, &ws.corpus, &instances)?;
        opt_step(encoder, &grads, opt);
        if !encoder.is_finite() {
            return Err(Error::NonFinite("encoder parameters after update".into()));
        }
        total += loss * chunk.len() as f64;
    }
    Ok(total / items.len() as f64)
}

fn train_reader_epoch(state: &mut EmState, examples: &[ReaderExample], cfg: &EmConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<ReaderExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
        let (loss, grads) = reader_gradients(&state.reader, &batch)?;
        reader_step(&mut state.reader, &grads, &mut state.reader_opt);
        if !state.reader.is_finite() {
            return Err(Error::NonFinite("reader parameters after update".into()));
        }
        total += loss * chunk.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

fn refresh(state: &mut EmState, ws: &Workspace) -> Result<()> {
    state.index = refresh_index_with(&state.index, &state.encoder, &ws.corpus, &ws.store)?;
    Ok(())
}

/// Lexical pseudo-labels: per question, the best-ranked passage among the
/// lexical top `warm_start_k` that contains an answer. Trains the encoder on
/// these one-hop pairs with in-batch negatives and refreshes the index.
/// Returns the number of questions that produced a pseudo-positive.
pub fn warm_start(state: &mut EmState, ws: &Workspace, cfg: &EmConfig) -> Result<usize> {
    let items: Vec<EncItem> = ws
        .train
        .iter()
        .filter_map(|q| {
            ws.lexical
                .search_rows(&q.text, cfg.warm_start_k)
                .into_iter()
                .map(|(row, _)| ws.lexical.position(row))
                .find(|&p| answer_match_passage(ws.store.at(p), &q.answers))
                .map(|p| EncItem {
                    query: ws.vocab.encode(&q.text),
                    positive: vec![p],
                    negatives: Vec::new(),
                })
        })
        .collect();
    if items.is_empty() {
        return Ok(0);
    }
    for epoch in 0..cfg.warm_start_epochs {
        let mut rng = stage_rng(cfg.seed, "warm-start", epoch);
        train_encoder_epoch(&mut state.encoder, &mut state.encoder_opt, ws, &items, cfg, &mut rng)?;
    }
    refresh(state, ws)?;
    Ok(items.len())
}

fn reader_inputs(ws: &Workspace, q: &Question, chains: &[&EvidenceChain]) -> Result<Vec<ReaderInput>> {
    chains
        .iter()
        .map(|c| ReaderInput::from_chain(&ws.vocab, &ws.store, q, c))
        .collect()
}

/// Trains a fresh reader on answer-filtered chains from the top
/// `reader_bootstrap_k` retrievals, sampling one positive per question and
/// epoch. Returns the number of questions used.
pub fn bootstrap_reader(state: &mut EmState, ws: &Workspace, cfg: &EmConfig) -> Result<usize> {
    let rcfg = retrieval_config(cfg, cfg.reader_bootstrap_k);
    let searcher = state.searcher(ws)?;
    let retrieved = retrieve_all(&searcher, &ws.store, &ws.train, &rcfg)?;
    let max_span = state.reader.max_span_len;
    let mut pools: Vec<(Vec<ReaderInput>, Vec<ReaderInput>, &Question)> = Vec::new();
    for (q, chains) in ws.train.iter().zip(&retrieved) {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for c in chains {
            if answer_match(c, &q.answers, &ws.store, cfg.answer_scope)? {
                pos.push(c);
            } else if neg.len() < cfg.negatives_per_question {
                neg.push(c);
            }
        }
        let pos: Vec<ReaderInput> = reader_inputs(ws, q, &pos)?
            .into_iter()
            .filter(|i| !crate::reader::answer_occurrences(i, &q.answers, max_span).is_empty())
            .collect();
        if !pos.is_empty() {
            pools.push((pos, reader_inputs(ws, q, &neg)?, q));
        }
    }
    if pools.is_empty() {
        return Err(Error::NoExamples(
            "no retrieved chain contains an answer; try an easier GenConfig (fewer passages or more hops coverage)".into(),
        ));
    }
    state.reader = fresh_reader(&state.encoder, cfg, 0);
    state.reader_opt = state.reader.new_opt_state(cfg.reader_lr);
    for epoch in 0..cfg.reader_bootstrap_epochs {
        let mut rng = stage_rng(cfg.seed, "bootstrap-reader", epoch);
        let examples = pools
            .iter()
            .map(|(pos, neg, q)| {
                let pick = rng.gen_range(0..pos.len());
                ReaderExample::new(pos[pick].clone(), neg.clone(), &q.answers, max_span)
            })
            .collect::<Result<Vec<_>>>()?;
        train_reader_epoch(state, &examples, cfg, &mut rng)?;
    }
    Ok(pools.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Positive,
    Negative,
    /// Has the answer but was filtered out, or lost the positive draw.
    Discarded,
    Unused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub pieces: Vec<String>,
    pub chain_score: f64,
    pub answer_match: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reader_match: Option<bool>,
    pub role: Role,
}

/// One line of the per-iteration examples dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleDump {
    pub question_id: String,
    pub used: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positive: Option<EvidenceChain>,
    pub negatives: Vec<EvidenceChain>,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EStepOutput {
    pub examples: Vec<TrainExample>,
    pub used_fraction: f64,
    /// Among used examples, the share whose positive is the gold chain.
    pub gold_match_fraction: f64,
    pub dumps: Vec<ExampleDump>,
}

/// Mines one example per question from the top `k_estep` chains.
pub fn e_step(state: &EmState, ws: &Workspace, cfg: &EmConfig, iteration: usize) -> Result<EStepOutput> {
    let rcfg = retrieval_config(cfg, cfg.k_estep);
    let searcher = state.searcher(ws)?;
    let dumps: Vec<ExampleDump> = ws
        .train
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            let chains = beam_search(&searcher, &ws.store, q, &rcfg)?;
            let mut rng = stage_rng(cfg.seed, &format!("e-step/{qi}"), iteration);
            mine(state, ws, cfg, q, chains, &mut rng)
        })
        .collect::<Result<_>>()?;
    let examples: Vec<TrainExample> = dumps
        .iter()
        .filter(|d| d.used)
        .map(|d| TrainExample {
            question_id: d.question_id.clone(),
            positive: d.positive.clone().unwrap(),
            negatives: d.negatives.clone(),
        })
        .collect();
    let gold_hits = examples
        .iter()
        .filter(|e| is_gold(ws, &e.question_id, &e.positive))
        .count();
    Ok(EStepOutput {
        used_fraction: if ws.train.is_empty() {
            0.0
        } else {
            examples.len() as f64 / ws.train.len() as f64
        },
        gold_match_fraction: if examples.is_empty() {
            0.0
        } else {
            gold_hits as f64 / examples.len() as f64
        },
        examples,
        dumps,
    })
}

/// Evaluation-only: whether a chain is exactly the question's gold chain.
fn is_gold(ws: &Workspace, question_id: &str, chain: &EvidenceChain) -> bool {
    ws.question(question_id)
        .and_then(|q| q.gold_chain.as_ref())
        .is_some_and(|g| *g == chain.piece_ids)
}

fn mine(
    state: &EmState,
    ws: &Workspace,
    cfg: &EmConfig,
    q: &Question,
    chains: Vec<EvidenceChain>,
    rng: &mut ChaCha8Rng,
) -> Result<ExampleDump> {
    let mut cands = Vec::with_capacity(chains.len());
    for c in &chains {
        let has = answer_match(c, &q.answers, &ws.store, cfg.answer_scope)?;
        let reader_ok = if has && cfg.filter_mode == FilterMode::AnswerReader {
            let input = ReaderInput::from_chain(&ws.vocab, &ws.store, q, c)?;
            Some(reader_filter_input(&state.reader, q, &input)?)
        } else {
            None
        };
        cands.push(Candidate {
            pieces: c.piece_ids.clone(),
            chain_score: c.chain_score,
            answer_match: has,
            reader_match: reader_ok,
            role: Role::Unused,
        });
    }
    let survivors: Vec<usize> = match cfg.filter_mode {
        FilterMode::None => (0..cands.len().min(1)).collect(),
        FilterMode::Answer => (0..cands.len()).filter(|&i| cands[i].answer_match).collect(),
        FilterMode::AnswerReader => (0..cands.len())
            .filter(|&i| cands[i].answer_match && cands[i].reader_match == Some(true))
            .collect(),
    };
    for c in cands.iter_mut().filter(|c| c.answer_match) {
        c.role = Role::Discarded;
    }
    let mut positive = match (survivors.is_empty(), cfg.positive_selection) {
        (true, _) => None,
        (false, PositiveSelection::Top1) => Some(survivors[0]),
        (false, PositiveSelection::SampleTopk) => Some(survivors[rng.gen_range(0..survivors.len())]),
    };
    if cfg.gold_only {
        positive = positive.filter(|&i| q.gold_chain.as_ref().is_some_and(|g| *g == cands[i].pieces));
    }
    let negatives: Vec<usize> = (0..cands.len())
        .filter(|&i| !cands[i].answer_match && Some(i) != positive)
        .take(cfg.negatives_per_question)
        .collect();
    let used = positive.is_some() && (cfg.negatives_per_question == 0 || !negatives.is_empty());
    if used {
        cands[positive.unwrap()].role = Role::Positive;
        for &i in &negatives {
            cands[i].role = Role::Negative;
        }
    }
    Ok(ExampleDump {
        question_id: q.id.clone(),
        used,
        positive: positive.filter(|_| used).map(|i| chains[i].clone()),
        negatives: if used {
            negatives.iter().map(|&i| chains[i].clone()).collect()
        } else {
            Vec::new()
        },
        candidates: cands,
    })
}

/// One round of retriever and reader updates on the mined examples, then an
/// index refresh. Returns the mean encoder loss and, when any positive has
/// an answer occurrence, the mean reader loss.
pub fn m_step(
    state: &mut EmState,
    ws: &Workspace,
    examples: &[TrainExample],
    cfg: &EmConfig,
    iteration: usize,
) -> Result<(f64, Option<f64>)> {
    if examples.is_empty() {
        return Err(Error::NoExamples("m-step needs at least one mined example".into()));
    }
    if cfg.reinit_each_mstep {
        let mut fresh = EmState::init(ws, &EmConfig {
            seed: cfg.seed.wrapping_add(iteration as u64),
            ..cfg.clone()
        })?;
        fresh.index = state.index.clone();
        *state = fresh;
    }
    let mut items = Vec::with_capacity(examples.len());
    let mut reader_examples = Vec::new();
    for ex in examples {
        let q = ws
            .question(&ex.question_id)
            .ok_or_else(|| Error::InvalidData(format!("unknown question `{}`", ex.question_id)))?;
        items.push(EncItem {
            query: ws.vocab.encode(&q.text),
            positive: positions(&ws.store, &ex.positive.piece_ids)?,
            negatives: ex
                .negatives
                .iter()
                .map(|n| positions(&ws.store, &n.piece_ids))
                .collect::<Result<_>>()?,
        });
        let pos = ReaderInput::from_chain(&ws.vocab, &ws.store, q, &ex.positive)?;
        let negs = reader_inputs(ws, q, &ex.negatives.iter().collect::<Vec<_>>())?;
        match ReaderExample::new(pos, negs, &q.answers, state.reader.max_span_len) {
            Ok(r) => reader_examples.push(r),
            Err(Error::NoAnswerOccurrence) => {}
            Err(e) => return Err(e),
        }
    }
    let mut enc_loss = 0.0;
    let mut reader_loss = None;
    for epoch in 0..cfg.epochs_per_mstep.max(1) {
        let mut rng = stage_rng(cfg.seed, &format!("m-step/encoder/{epoch}"), iteration);
        enc_loss = train_encoder_epoch(&mut state.encoder, &mut state.encoder_opt, ws, &items, cfg, &mut rng)?;
        if !reader_examples.is_empty() {
            let mut rng = stage_rng(cfg.seed, &format!("m-step/reader/{epoch}"), iteration);
            reader_loss = Some(train_reader_epoch(state, &reader_examples, cfg, &mut rng)?);
        }
    }
    refresh(state, ws)?;
    Ok((enc_loss, reader_loss))
}
