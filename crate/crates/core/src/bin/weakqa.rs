use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use weakqa::data::{generate_synthetic, load_questions, Dataset, GenConfig, Question};
use weakqa::error::{Error, Result};
use weakqa::harness::{
    build_report, load_checkpoint, load_predictions, load_retrievals, save_checkpoint, save_predictions,
    save_retrievals, write_json, Checkpoint, Prediction, Retrieval,
};
use weakqa::index::build_dense_index_with;
use weakqa::reader::{predict_inputs, rerank, ReaderInput};
use weakqa::retriever::{beam_search, retrieve_all, LexicalSearcher, RetrievalConfig};
use weakqa::trainer::{
    bootstrap_reader, checkpoint_name, dump_embeddings, run_ablation, run_em, warm_start, EmConfig, EmState,
    FilterMode, InitMode, PositiveSelection, RunOptions, Variant, Workspace,
};

const SEED_ENV: &str = "WEAKQA_SEED";

#[derive(Parser)]
#[command(name = "weakqa", version, about = "Weakly-supervised multi-hop retrieval and reading")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with train/dev questions.
    GenData(GenArgs),
    /// Lexical warm start plus reader bootstrap; writes checkpoint 0.
    WarmStart(TrainArgs),
    /// Full EM run with per-iteration stats and checkpoints.
    Train(TrainArgs),
    /// Dense beam-search retrieval for a question split.
    Retrieve(RetrieveArgs),
    /// Rerank a retrieval pool and extract answers.
    Answer(AnswerArgs),
    /// Score retrievals and/or predictions against gold.
    Eval(EvalArgs),
    /// Compare filter modes, positive selection and gold-only training.
    Ablate(AblateArgs),
    /// TF-IDF beam-search retrieval.
    BaselineTfidf(BaselineArgs),
    /// Question and top passage vectors as TSV.
    DumpEmbeddings(DumpArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML file with generator keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the single-hop preset.
    #[arg(long)]
    single_hop: bool,
    #[arg(long)]
    num_passages: Option<usize>,
    #[arg(long)]
    num_train: Option<usize>,
    #[arg(long)]
    num_dev: Option<usize>,
    #[arg(long)]
    hops: Option<usize>,
    #[arg(long)]
    distractor_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct EmFlags {
    /// TOML file with trainer keys; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    filter_mode: Option<String>,
    #[arg(long)]
    sample_topk: bool,
    #[arg(long)]
    gold_only: bool,
    #[arg(long)]
    random_init: bool,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    em: EmFlags,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Question file; defaults to the dev split of `--data`.
    #[arg(long)]
    questions: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
}

#[derive(Args)]
struct AnswerArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    questions: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pool: usize,
    /// Chains kept after reranking.
    #[arg(long, default_value_t = 10)]
    top: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    questions: Option<PathBuf>,
    #[arg(long)]
    retrievals: Option<PathBuf>,
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    single_chain: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    em: EmFlags,
    /// Comma-separated filter modes.
    #[arg(long, default_value = "none,answer,answer+reader")]
    modes: String,
    /// Also run each mode with sampled positives.
    #[arg(long)]
    with_sampling: bool,
    /// Also run a gold-only arm.
    #[arg(long)]
    with_gold_only: bool,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    questions: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    /// Hops per chain; defaults to the gold chain length.
    #[arg(long)]
    hops: Option<usize>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    question: String,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        3
    } else if matches!(e, Error::InvalidConfig(_)) {
        1
    } else {
        2
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV} must be an unsigned integer, got `{s}`"))),
        Err(_) => Ok(None),
    }
}

fn gen_config(a: &GenArgs) -> Result<GenConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))?
        }
        None if a.single_hop => GenConfig::single_hop(),
        None => GenConfig::default(),
    };
    if let Some(s) = env_seed()? {
        cfg.seed = s;
    }
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    set!(num_passages, num_train, num_dev, hops, distractor_fraction, seed);
    Ok(cfg)
}

fn em_config(f: &EmFlags) -> Result<EmConfig> {
    let mut cfg = match &f.config {
        Some(p) => EmConfig::load(p)?,
        None => EmConfig::default(),
    };
    if let Some(s) = env_seed()? {
        cfg.seed = s;
    }
    if let Some(v) = f.iterations {
        cfg.iterations = v;
    }
    if let Some(m) = &f.filter_mode {
        cfg.filter_mode = FilterMode::parse(m)?;
    }
    if f.sample_topk {
        cfg.positive_selection = PositiveSelection::SampleTopk;
    }
    if f.gold_only {
        cfg.gold_only = true;
    }
    if f.random_init {
        cfg.init_mode = InitMode::Random;
    }
    if let Some(v) = f.dim {
        cfg.dim = v;
    }
    if let Some(v) = f.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(dir: &Path, hops: Option<usize>) -> Result<Dataset> {
    let data = Dataset::load_dir(dir)?;
    if let Some(h) = hops {
        data.validate(h)?;
    }
    Ok(data)
}

fn questions_for(data: &Dataset, path: &Option<PathBuf>) -> Result<Vec<Question>> {
    match path {
        Some(p) => load_questions(p),
        None => Ok(data.dev.clone()),
    }
}

/// Workspace and state restored from a checkpoint.
fn restore(data: &Dataset, path: &Path) -> Result<(Workspace, EmState, Checkpoint)> {
    let cp = load_checkpoint(path)?;
    let ws = Workspace::with_vocab(data, cp.vocab.clone())?;
    let mut index = build_dense_index_with(&cp.encoder, &ws.corpus, &ws.store)?;
    index.params_version = cp.index_params_version;
    let state = EmState {
        encoder: cp.encoder.clone(),
        reader: cp.reader.clone(),
        encoder_opt: cp.encoder_opt.clone(),
        reader_opt: cp.reader_opt.clone(),
        index,
    };
    Ok((ws, state, cp))
}

fn retrieval_config(cfg: &EmConfig, top_k: usize) -> Result<RetrievalConfig> {
    let rcfg = RetrievalConfig {
        score_combine: cfg.score_combine,
        ..RetrievalConfig::new(cfg.hops, cfg.beam_width.max(top_k), top_k)
    };
    rcfg.validate()?;
    Ok(rcfg)
}

fn print_stats(stats: &[weakqa::trainer::IterationStats]) {
    println!("iter  used   gold   ans@k  psg@k  chain@k  em     margin");
    let opt = |v: Option<f64>| v.map_or("  -  ".to_string(), |x| format!("{x:.3}"));
    for s in stats {
        println!(
            "{:>4}  {}  {}  {:.3}  {:.3}  {:.3}    {}  {:.3}",
            s.iteration,
            opt(s.used_fraction),
            opt(s.gold_match_fraction),
            s.dev_answer_recall,
            s.dev_passage_recall,
            s.dev_chain_recall,
            opt(s.dev_exact_match),
            s.mean_margin
        );
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => {
            let cfg = gen_config(&a)?;
            let data = generate_synthetic(&cfg)?;
            data.save_dir(&a.out)?;
            println!(
                "wrote {} passages, {} train and {} dev questions to {}",
                data.passages.len(),
                data.train.len(),
                data.dev.len(),
                a.out.display()
            );
        }
        Command::WarmStart(a) => {
            let cfg = em_config(&a.em)?;
            let data = load_data(&a.data, Some(cfg.hops))?;
            let ws = Workspace::new(&data)?;
            let mut state = EmState::init(&ws, &cfg)?;
            if cfg.init_mode == InitMode::LexicalWarmstart {
                let n = warm_start(&mut state, &ws, &cfg)?;
                println!("warm start on {n} lexical pseudo-positives");
            }
            let n = bootstrap_reader(&mut state, &ws, &cfg)?;
            println!("reader bootstrapped on {n} questions");
            let cp = Checkpoint::from_state(&ws.vocab, &cfg, &state, 0, &[]);
            save_checkpoint(&a.out.join(checkpoint_name(0)), &cp)?;
        }
        Command::Train(a) => {
            let cfg = em_config(&a.em)?;
            let data = load_data(&a.data, Some(cfg.hops))?;
            let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
            let opts = RunOptions {
                out_dir: Some(a.out.clone()),
                resume,
                stop_after: a.stop_after,
            };
            let run = run_em(&data, &cfg, &opts)?;
            print_stats(&run.stats);
            if run.stopped_early {
                println!("stopped early after iteration {}", run.stats.last().map_or(0, |s| s.iteration));
            }
        }
        Command::Retrieve(a) => {
            let data = load_data(&a.data, None)?;
            let (ws, state, cp) = restore(&data, &a.checkpoint)?;
            let questions = questions_for(&data, &a.questions)?;
            let rcfg = retrieval_config(&cp.config, a.top_k)?;
            let chains = retrieve_all(&state.searcher(&ws)?, &ws.store, &questions, &rcfg)?;
            let out: Vec<Retrieval> = questions
                .iter()
                .zip(chains)
                .map(|(q, c)| Retrieval::new(q.id.clone(), c))
                .collect();
            save_retrievals(&a.out, &out)?;
        }
        Command::Answer(a) => {
            if a.top == 0 || a.top > a.pool {
                return Err(Error::InvalidConfig("need 1 <= top <= pool".into()));
            }
            let data = load_data(&a.data, None)?;
            let (ws, state, cp) = restore(&data, &a.checkpoint)?;
            let questions = questions_for(&data, &a.questions)?;
            let rcfg = retrieval_config(&cp.config, a.pool)?;
            let searcher = state.searcher(&ws)?;
            let preds = questions
                .par_iter()
                .map(|q| -> Result<Option<Prediction>> {
                    let chains = beam_search(&searcher, &ws.store, q, &rcfg)?;
                    if chains.is_empty() {
                        return Ok(None);
                    }
                    let pieces = chains
                        .iter()
                        .map(|c| ws.store.resolve(&c.piece_ids))
                        .collect::<Result<Vec<_>>>()?;
                    let probs = rerank(&state.reader, &ws.vocab, q, &pieces)?;
                    let mut order: Vec<usize> = (0..chains.len()).collect();
                    order.sort_by(|&x, &y| probs[y].total_cmp(&probs[x]).then(x.cmp(&y)));
                    order.truncate(a.top);
                    let inputs = order
                        .iter()
                        .map(|&i| ReaderInput::from_chain(&ws.vocab, &ws.store, q, &chains[i]))
                        .collect::<Result<Vec<_>>>()?;
                    let p = predict_inputs(&state.reader, &inputs)?;
                    Ok(Some(Prediction {
                        question_id: q.id.clone(),
                        answer: p.answer_text,
                        span_prob: p.span_prob,
                        rerank_prob: p.rerank_prob,
                    }))
                })
                .collect::<Result<Vec<_>>>()?;
            save_predictions(&a.out, &preds.into_iter().flatten().collect::<Vec<_>>())?;
        }
        Command::Eval(a) => {
            let data = load_data(&a.data, None)?;
            let questions = questions_for(&data, &a.questions)?;
            if a.retrievals.is_none() && a.predictions.is_none() {
                return Err(Error::InvalidConfig("pass --retrievals and/or --predictions".into()));
            }
            let r = a.retrievals.as_deref().map(load_retrievals).transpose()?;
            let p = a.predictions.as_deref().map(load_predictions).transpose()?;
            let report = build_report(r.as_deref(), p.as_deref(), &questions, &data.passages, a.k, a.single_chain);
            write_json(&a.out, &report)?;
            let show = |name: &str, v: Option<f64>| {
                if let Some(v) = v {
                    println!("{name:<16}{v:.4}");
                }
            };
            show("answer_recall", report.answer_recall);
            show("passage_recall", report.passage_recall);
            show("chain_recall", report.chain_recall);
            show("exact_match", report.exact_match);
        }
        Command::Ablate(a) => {
            let cfg = em_config(&a.em)?;
            let data = load_data(&a.data, Some(cfg.hops))?;
            let ws = Workspace::new(&data)?;
            let base = Variant::of(&cfg);
            let mut variants = Vec::new();
            for m in a.modes.split(',').map(str::trim).filter(|m| !m.is_empty()) {
                let mode = FilterMode::parse(m)?;
                variants.push(Variant {
                    filter_mode: mode,
                    ..base
                });
                if a.with_sampling {
                    variants.push(Variant {
                        filter_mode: mode,
                        positive_selection: PositiveSelection::SampleTopk,
                        ..base
                    });
                }
            }
            if a.with_gold_only {
                variants.push(Variant { gold_only: true, ..base });
            }
            let arms = run_ablation(&ws, &cfg, &variants)?;
            println!("{:<28} {:>8} {:>8} {:>8}", "arm", "chain@0", "chain@N", "em@N");
            for arm in &arms {
                let first = arm.stats.first().map_or(0.0, |s| s.dev_chain_recall);
                let last = arm.stats.last();
                println!(
                    "{:<28} {:>8.3} {:>8.3} {:>8}",
                    arm.name,
                    first,
                    last.map_or(0.0, |s| s.dev_chain_recall),
                    last.and_then(|s| s.dev_exact_match).map_or("-".into(), |v| format!("{v:.3}"))
                );
            }
            let report = serde_json::json!({
                "schema_version": weakqa::harness::REPORT_SCHEMA_VERSION,
                "arms": arms,
            });
            write_json(&a.out, &report)?;
        }
        Command::BaselineTfidf(a) => {
            let data = load_data(&a.data, None)?;
            let questions = questions_for(&data, &a.questions)?;
            let hops = match a.hops {
                Some(h) => h,
                None => questions
                    .iter()
                    .find_map(|q| q.gold_chain.as_ref().map(Vec::len))
                    .ok_or_else(|| Error::InvalidConfig("no gold chains; pass --hops".into()))?,
            };
            let ws = Workspace::new(&data)?;
            let searcher = LexicalSearcher {
                index: &ws.lexical,
                store: &ws.store,
            };
            let rcfg = RetrievalConfig::new(hops, a.top_k, a.top_k);
            rcfg.validate()?;
            let chains = retrieve_all(&searcher, &ws.store, &questions, &rcfg)?;
            let out: Vec<Retrieval> = questions
                .iter()
                .zip(chains)
                .map(|(q, c)| Retrieval::new(q.id.clone(), c))
                .collect();
            save_retrievals(&a.out, &out)?;
        }
        Command::DumpEmbeddings(a) => {
            let data = load_data(&a.data, None)?;
            let (ws, state, _) = restore(&data, &a.checkpoint)?;
            let q = ws
                .question(&a.question)
                .ok_or_else(|| Error::InvalidData(format!("unknown question `{}`", a.question)))?;
            let tsv = dump_embeddings(&state, &ws, q, a.k)?;
            std::fs::write(&a.out, tsv).map_err(|e| Error::io(&a.out, e))?;
        }
    }
    Ok(())
}
