use std::fmt::Write as _;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    bootstrap_reader, e_step, m_step, retrieval_config, warm_start, EmConfig, EmState, FilterMode, InitMode,
    PositiveSelection, Workspace,
};
use crate::data::{Dataset, Question};
use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::harness::{
    answer_recall, chain_recall, exact_match_score, passage_recall, save_checkpoint, write_json, Checkpoint, Prediction,
    Retrieval,
};
use crate::index::build_dense_index_with;
use crate::linalg::dot;
use crate::reader::{predict_inputs, ReaderInput};
use crate::retriever::retrieve_all;

pub const STATS_FILE: &str = "stats.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    /// Share of train questions that yielded an example; absent before the
    /// first E-step.
    pub used_fraction: Option<f64>,
    pub gold_match_fraction: Option<f64>,
    pub num_examples: usize,
    pub dev_answer_recall: f64,
    pub dev_passage_recall: f64,
    pub dev_chain_recall: f64,
    pub dev_exact_match: Option<f64>,
    pub mean_margin: f64,
    pub encoder_loss: Option<f64>,
    pub reader_loss: Option<f64>,
    pub index_version: u64,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Receives `stats.json`, per-iteration checkpoints and example dumps.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Stop after this iteration has completed.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct EmRun {
    pub state: EmState,
    pub stats: Vec<IterationStats>,
    pub stopped_early: bool,
}

pub fn checkpoint_name(iteration: usize) -> String {
    format!("checkpoint-{iteration:03}.bin")
}

pub fn examples_name(iteration: usize) -> String {
    format!("examples-{iteration:03}.jsonl")
}

/// Dev retrieval metrics, optional exact match and mean margin.
#[derive(Debug, Clone, PartialEq)]
pub struct DevEval {
    pub answer_recall: f64,
    pub passage_recall: f64,
    pub chain_recall: f64,
    pub exact_match: Option<f64>,
    pub mean_margin: f64,
    pub retrievals: Vec<Retrieval>,
}

pub fn evaluate_dev(state: &EmState, ws: &Workspace, cfg: &EmConfig) -> Result<DevEval> {
    evaluate_questions(state, ws, cfg, &ws.dev)
}

fn evaluate_questions(state: &EmState, ws: &Workspace, cfg: &EmConfig, questions: &[Question]) -> Result<DevEval> {
    let rcfg = retrieval_config(cfg, cfg.eval_k);
    let searcher = state.searcher(ws)?;
    let chains = retrieve_all(&searcher, &ws.store, questions, &rcfg)?;
    let retrievals: Vec<Retrieval> = questions
        .iter()
        .zip(chains)
        .map(|(q, c)| Retrieval::new(q.id.clone(), c))
        .collect();
    let exact_match = if cfg.eval_exact_match {
        let preds = questions
            .par_iter()
            .zip(&retrievals)
            .filter(|(_, r)| !r.chains.is_empty())
            .map(|(q, r)| {
                let inputs = r
                    .chains
                    .iter()
                    .map(|c| ReaderInput::from_chain(&ws.vocab, &ws.store, q, c))
                    .collect::<Result<Vec<_>>>()?;
                let p = predict_inputs(&state.reader, &inputs)?;
                Ok(Prediction {
                    question_id: q.id.clone(),
                    answer: p.answer_text,
                    span_prob: p.span_prob,
                    rerank_prob: p.rerank_prob,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Some(exact_match_score(&preds, questions))
    } else {
        None
    };
    let margins = margin_diagnostics(state, ws, questions)?;
    let mean_margin = if margins.is_empty() {
        0.0
    } else {
        margins.iter().map(|m| m.1).sum::<f64>() / margins.len() as f64
    };
    Ok(DevEval {
        answer_recall: answer_recall(&retrievals, questions, &ws.store),
        passage_recall: passage_recall(&retrievals, questions).value,
        chain_recall: chain_recall(&retrievals, questions, cfg.single_chain_recall).value,
        exact_match,
        mean_margin,
        retrievals,
    })
}

/// Per question with a gold chain: hop-1 score of the first gold piece minus
/// the mean score of the ten best-scoring non-gold passages.
pub fn margin_diagnostics(state: &EmState, ws: &Workspace, questions: &[Question]) -> Result<Vec<(String, f64)>> {
    let searcher = state.searcher(ws)?;
    questions
        .par_iter()
        .filter_map(|q| q.gold_chain.as_ref().map(|g| (q, g)))
        .map(|(q, gold)| {
            let qv = searcher.query_vector(q, &[]);
            let first = state
                .index
                .row_of(&gold[0])
                .ok_or_else(|| Error::UnknownPassage(gold[0].clone()))?;
            let pos = dot(&qv, first);
            let negs: Vec<f64> = state
                .index
                .search_rows(&qv, 10 + gold.len())?
                .into_iter()
                .filter(|(row, _)| !gold.contains(&state.index.ids()[*row]))
                .take(10)
                .map(|(_, s)| s)
                .collect();
            let mean = if negs.is_empty() {
                0.0
            } else {
                negs.iter().sum::<f64>() / negs.len() as f64
            };
            Ok((q.id.clone(), pos - mean))
        })
        .collect()
}

/// TSV of the question vector and its top-`k` hop-1 passage vectors:
/// `label  gold  v_0 .. v_{d-1}` with labels `Q` and `P:<id>`.
pub fn dump_embeddings(state: &EmState, ws: &Workspace, question: &Question, k: usize) -> Result<String> {
    let searcher = state.searcher(ws)?;
    let qv = searcher.query_vector(question, &[]);
    let gold = question.gold_chain.clone().unwrap_or_default();
    let mut out = String::new();
    let mut row = |label: &str, gold: bool, v: &[f64]| {
        let _ = write!(out, "{label}\t{}", u8::from(gold));
        for x in v {
            let _ = write!(out, "\t{x}");
        }
        out.push('\n');
    };
    row("Q", false, &qv);
    for (r, _) in state.index.search_rows(&qv, k)? {
        let id = &state.index.ids()[r];
        row(&format!("P:{id}"), gold.contains(id), state.index.row(r));
    }
    Ok(out)
}

fn iteration_stats(
    state: &EmState,
    ws: &Workspace,
    cfg: &EmConfig,
    iteration: usize,
    mining: Option<(f64, f64, usize)>,
    losses: (Option<f64>, Option<f64>),
) -> Result<IterationStats> {
    let dev = evaluate_dev(state, ws, cfg)?;
    Ok(IterationStats {
        iteration,
        used_fraction: mining.map(|m| m.0),
        gold_match_fraction: mining.map(|m| m.1),
        num_examples: mining.map_or(0, |m| m.2),
        dev_answer_recall: dev.answer_recall,
        dev_passage_recall: dev.passage_recall,
        dev_chain_recall: dev.chain_recall,
        dev_exact_match: dev.exact_match,
        mean_margin: dev.mean_margin,
        encoder_loss: losses.0,
        reader_loss: losses.1,
        index_version: state.index.params_version,
    })
}

/// True once `patience` consecutive iterations improved dev chain recall by
/// less than `early_stop_delta`, never before `min_iterations`.
fn should_stop(stats: &[IterationStats], cfg: &EmConfig) -> bool {
    let done = stats.len().saturating_sub(1);
    if cfg.early_stop_patience == 0 || done < cfg.min_iterations.max(cfg.early_stop_patience) {
        return false;
    }
    stats
        .windows(2)
        .rev()
        .take(cfg.early_stop_patience)
        .all(|w| w[1].dev_chain_recall - w[0].dev_chain_recall < cfg.early_stop_delta)
}

fn persist(ws: &Workspace, cfg: &EmConfig, state: &EmState, stats: &[IterationStats], opts: &RunOptions) -> Result<()> {
    let Some(dir) = &opts.out_dir else { return Ok(()) };
    let iteration = stats.last().map_or(0, |s| s.iteration);
    let cp = Checkpoint::from_state(&ws.vocab, cfg, state, iteration, stats);
    save_checkpoint(&dir.join(checkpoint_name(iteration)), &cp)?;
    write_json(&dir.join(STATS_FILE), &stats)
}

pub fn run_em(data: &Dataset, cfg: &EmConfig, opts: &RunOptions) -> Result<EmRun> {
    let ws = match &opts.resume {
        Some(cp) => Workspace::with_vocab(data, cp.vocab.clone())?,
        None => Workspace::new(data)?,
    };
    run_em_in(&ws, cfg, opts)
}

/// Initialization, then up to `cfg.iterations` E-step/M-step rounds with
/// dev evaluation, checkpoints and early stopping.
pub fn run_em_in(ws: &Workspace, cfg: &EmConfig, opts: &RunOptions) -> Result<EmRun> {
    cfg.validate()?;
    let (mut state, mut stats) = match &opts.resume {
        Some(cp) => {
            if cp.vocab != ws.vocab {
                return Err(Error::Checkpoint("checkpoint vocabulary does not match the data".into()));
            }
            if cp.config != *cfg {
                return Err(Error::Checkpoint("checkpoint was written with a different config".into()));
            }
            let mut index = build_dense_index_with(&cp.encoder, &ws.corpus, &ws.store)?;
            index.params_version = cp.index_params_version;
            let state = EmState {
                encoder: cp.encoder.clone(),
                reader: cp.reader.clone(),
                encoder_opt: cp.encoder_opt.clone(),
                reader_opt: cp.reader_opt.clone(),
                index,
            };
            (state, cp.stats.clone())
        }
        None => {
            let mut state = EmState::init(ws, cfg)?;
            if cfg.init_mode == InitMode::LexicalWarmstart {
                warm_start(&mut state, ws, cfg)?;
            }
            bootstrap_reader(&mut state, ws, cfg)?;
            let s0 = iteration_stats(&state, ws, cfg, 0, None, (None, None))?;
            let stats = vec![s0];
            persist(ws, cfg, &state, &stats, opts)?;
            (state, stats)
        }
    };
    debug_assert_eq!(state.index.encoder_version, state.encoder.version());
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut stopped_early = false;
    let start = stats.last().map_or(0, |s| s.iteration) + 1;
    for it in start..=cfg.iterations {
        if opts.stop_after.is_some_and(|s| s < it) {
            break;
        }
        if should_stop(&stats, cfg) {
            stopped_early = true;
            break;
        }
        let mined = e_step(&state, ws, cfg, it)?;
        if let Some(dir) = &opts.out_dir {
            crate::data::write_jsonl(&dir.join(examples_name(it)), &mined.dumps)?;
        }
        let losses = if mined.examples.is_empty() {
            (None, None)
        } else {
            let (e, r) = m_step(&mut state, ws, &mined.examples, cfg, it)?;
            (Some(e), r)
        };
        let s = iteration_stats(
            &state,
            ws,
            cfg,
            it,
            Some((mined.used_fraction, mined.gold_match_fraction, mined.examples.len())),
            losses,
        )?;
        stats.push(s);
        persist(ws, cfg, &state, &stats, opts)?;
    }
    Ok(EmRun {
        state,
        stats,
        stopped_early,
    })
}

/// One arm of an ablation sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub filter_mode: FilterMode,
    pub positive_selection: PositiveSelection,
    pub gold_only: bool,
}

impl Variant {
    pub fn of(cfg: &EmConfig) -> Self {
        Self {
            filter_mode: cfg.filter_mode,
            positive_selection: cfg.positive_selection,
            gold_only: cfg.gold_only,
        }
    }

    pub fn apply(&self, cfg: &EmConfig) -> EmConfig {
        EmConfig {
            filter_mode: self.filter_mode,
            positive_selection: self.positive_selection,
            gold_only: self.gold_only,
            ..cfg.clone()
        }
    }

    pub fn name(&self) -> String {
        let mut name = self.filter_mode.name().to_string();
        if self.positive_selection == PositiveSelection::SampleTopk {
            name.push_str("/sample");
        }
        if self.gold_only {
            name.push_str("/gold-only");
        }
        name
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub name: String,
    pub variant: Variant,
    pub stats: Vec<IterationStats>,
}

/// Runs every variant from the same initialization config, in order.
pub fn run_ablation(ws: &Workspace, cfg: &EmConfig, variants: &[Variant]) -> Result<Vec<AblationArm>> {
    variants
        .iter()
        .map(|v| {
            let run = run_em_in(ws, &v.apply(cfg), &RunOptions::default())?;
            Ok(AblationArm {
                name: v.name(),
                variant: *v,
                stats: run.stats,
            })
        })
        .collect()
}
