use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{contains_any_answer, normalize_answer, Prediction, Retrieval};
use crate::data::{PassageStore, Question};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// A recall value plus how many questions it was computed over.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub value: f64,
    pub counted: usize,
    /// Questions skipped for lacking a gold chain.
    pub excluded: usize,
}

fn by_id(retrievals: &[Retrieval]) -> HashMap<&str, &Retrieval> {
    retrievals.iter().map(|r| (r.question_id.as_str(), r)).collect()
}

fn mean(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

fn answer_hit(r: Option<&Retrieval>, q: &Question, store: &PassageStore) -> bool {
    r.is_some_and(|r| {
        r.chains.iter().flat_map(|c| &c.piece_ids).any(|id| {
            store
                .get(id)
                .is_some_and(|p| contains_any_answer(&p.text, &q.answers))
        })
    })
}

fn passage_hit(r: Option<&Retrieval>, gold: &[String]) -> bool {
    r.is_some_and(|r| r.chains.iter().flat_map(|c| &c.piece_ids).any(|id| gold.contains(id)))
}

fn chain_hit(r: Option<&Retrieval>, gold: &[String], single_chain: bool) -> bool {
    let Some(r) = r else { return false };
    if single_chain {
        return r.chains.iter().any(|c| gold.iter().all(|g| c.piece_ids.contains(g)));
    }
    let got: HashSet<&String> = r.chains.iter().flat_map(|c| &c.piece_ids).collect();
    gold.iter().all(|g| got.contains(g))
}

/// Fraction of questions with an answer string in some retrieved piece's text.
pub fn answer_recall(retrievals: &[Retrieval], questions: &[Question], store: &PassageStore) -> f64 {
    let map = by_id(retrievals);
    let hits = questions
        .iter()
        .filter(|q| answer_hit(map.get(q.id.as_str()).copied(), q, store))
        .count();
    mean(hits, questions.len())
}

/// Fraction of gold-annotated questions with at least one gold piece retrieved.
pub fn passage_recall(retrievals: &[Retrieval], questions: &[Question]) -> Recall {
    gold_recall(retrievals, questions, |r, g| passage_hit(r, g))
}

/// Fraction of gold-annotated questions with every gold piece retrieved:
/// anywhere in the top-k by default, inside one chain with `single_chain`.
pub fn chain_recall(retrievals: &[Retrieval], questions: &[Question], single_chain: bool) -> Recall {
    gold_recall(retrievals, questions, |r, g| chain_hit(r, g, single_chain))
}

fn gold_recall<F>(retrievals: &[Retrieval], questions: &[Question], hit: F) -> Recall
where
    F: Fn(Option<&Retrieval>, &[String]) -> bool,
{
    let map = by_id(retrievals);
    let mut counted = 0;
    let mut hits = 0;
    for q in questions {
        let Some(gold) = &q.gold_chain else { continue };
        counted += 1;
        if hit(map.get(q.id.as_str()).copied(), gold) {
            hits += 1;
        }
    }
    Recall {
        value: mean(hits, counted),
        counted,
        excluded: questions.len() - counted,
    }
}

fn em_hit(pred: Option<&str>, q: &Question) -> bool {
    pred.is_some_and(|p| {
        let p = normalize_answer(p);
        q.answers.iter().any(|a| normalize_answer(a) == p)
    })
}

/// Normalized exact match; questions without a prediction score 0.
pub fn exact_match_score(predictions: &[Prediction], questions: &[Question]) -> f64 {
    let map: HashMap<&str, &str> = predictions
        .iter()
        .map(|p| (p.question_id.as_str(), p.answer.as_str()))
        .collect();
    let hits = questions
        .iter()
        .filter(|q| em_hit(map.get(q.id.as_str()).copied(), q))
        .count();
    mean(hits, questions.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionMetrics {
    pub question_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer_hit: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub passage_hit: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chain_hit: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_match: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub k: usize,
    pub num_questions: usize,
    pub answer_recall: Option<f64>,
    pub passage_recall: Option<f64>,
    pub chain_recall: Option<f64>,
    pub exact_match: Option<f64>,
    pub single_chain: bool,
    pub questions_without_gold: usize,
    pub per_question: Vec<QuestionMetrics>,
}

/// Full report over the first `k` chains of each retrieval.
pub fn build_report(
    retrievals: Option<&[Retrieval]>,
    predictions: Option<&[Prediction]>,
    questions: &[Question],
    store: &PassageStore,
    k: usize,
    single_chain: bool,
) -> MetricsReport {
    let truncated: Option<Vec<Retrieval>> = retrievals.map(|rs| {
        rs.iter()
            .map(|r| Retrieval::new(r.question_id.clone(), r.chains.iter().take(k).cloned().collect()))
            .collect()
    });
    let rmap = truncated.as_deref().map(by_id);
    let pmap: Option<HashMap<&str, &str>> = predictions.map(|ps| {
        ps.iter()
            .map(|p| (p.question_id.as_str(), p.answer.as_str()))
            .collect()
    });
    let per_question = questions
        .iter()
        .map(|q| {
            let r = rmap.as_ref().map(|m| m.get(q.id.as_str()).copied());
            QuestionMetrics {
                question_id: q.id.clone(),
                answer_hit: r.map(|r| answer_hit(r, q, store)),
                passage_hit: r.and_then(|r| q.gold_chain.as_ref().map(|g| passage_hit(r, g))),
                chain_hit: r.and_then(|r| q.gold_chain.as_ref().map(|g| chain_hit(r, g, single_chain))),
                exact_match: pmap.as_ref().map(|m| em_hit(m.get(q.id.as_str()).copied(), q)),
            }
        })
        .collect();
    let without_gold = questions.iter().filter(|q| q.gold_chain.is_none()).count();
    let gold_metric = |f: fn(&[Retrieval], &[Question]) -> Recall, rs: &[Retrieval]| {
        let r = f(rs, questions);
        (r.counted > 0).then_some(r.value)
    };
    MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        k,
        num_questions: questions.len(),
        answer_recall: truncated.as_deref().map(|rs| answer_recall(rs, questions, store)),
        passage_recall: truncated.as_deref().and_then(|rs| gold_metric(passage_recall, rs)),
        chain_recall: truncated.as_deref().and_then(|rs| {
            let r = chain_recall(rs, questions, single_chain);
            (r.counted > 0).then_some(r.value)
        }),
        exact_match: predictions.map(|ps| exact_match_score(ps, questions)),
        single_chain,
        questions_without_gold: without_gold,
        per_question,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Passage;
    use proptest::prelude::*;

    fn q(id: &str, gold: &[&str]) -> Question {
        Question::new(id, "?", vec!["Tovan".into()]).with_gold(gold.iter().map(|s| s.to_string()).collect())
    }

    fn r(id: &str, chains: &[&[&str]]) -> Retrieval {
        Retrieval::from_piece_lists(id, chains.iter().map(|c| c.iter().map(|s| s.to_string()).collect()).collect())
    }

    #[test]
    fn one_of_two_gold_pieces() {
        let qs = [q("a", &["g1", "g2"])];
        let rs = [r("a", &[&["g1", "x"]])];
        assert_eq!(passage_recall(&rs, &qs).value, 1.0);
        assert_eq!(chain_recall(&rs, &qs, false).value, 0.0);
        let none = [r("a", &[&["x", "y"]])];
        assert_eq!(passage_recall(&none, &qs).value, 0.0);
    }

    #[test]
    fn split_gold_pieces_count_for_set_containment_only() {
        let qs = [q("a", &["g1", "g2"])];
        let rs = [r("a", &[&["g1", "x"], &["y", "g2"]])];
        assert_eq!(chain_recall(&rs, &qs, false).value, 1.0);
        assert_eq!(chain_recall(&rs, &qs, true).value, 0.0);
        let together = [r("a", &[&["g1", "g2"]])];
        assert_eq!(chain_recall(&together, &qs, true).value, 1.0);
    }

    #[test]
    fn questions_without_gold_are_excluded() {
        let qs = [q("a", &["g"]), Question::new("b", "?", vec!["x".into()])];
        let rs = [r("a", &[&["g"]])];
        let rec = passage_recall(&rs, &qs);
        assert_eq!((rec.value, rec.counted, rec.excluded), (1.0, 1, 1));
    }

    #[test]
    fn answer_recall_counts_hits() {
        let store = PassageStore::new(vec![
            Passage::new("hit", "", "It is based in Tovan."),
            Passage::new("miss", "Tovan", "Nothing to see."),
        ])
        .unwrap();
        let qs: Vec<Question> = (0..10).map(|i| q(&format!("q{i}"), &["hit"])).collect();
        let rs: Vec<Retrieval> = (0..10)
            .map(|i| r(&format!("q{i}"), &[&[if i < 7 { "hit" } else { "miss" }]]))
            .collect();
        assert!((answer_recall(&rs, &qs, &store) - 0.7).abs() < 1e-12);
        assert_eq!(answer_recall(&[], &qs, &store), 0.0);
    }

    #[test]
    fn exact_match_cases() {
        let pred = |a: &str| {
            vec![Prediction {
                question_id: "a".into(),
                answer: a.into(),
                span_prob: 1.0,
                rerank_prob: 1.0,
            }]
        };
        let mist = [Question::new("a", "?", vec!["the mist".into()])];
        assert_eq!(exact_match_score(&pred("The Mist"), &mist), 1.0);
        assert_eq!(exact_match_score(&pred("mist"), &mist), 1.0);
        let ny = [Question::new("a", "?", vec!["New York".into()])];
        assert_eq!(exact_match_score(&pred("New Jersey"), &ny), 0.0);
        assert_eq!(exact_match_score(&[], &ny), 0.0);
    }

    #[test]
    fn identity_evaluation_is_perfect() {
        let store = PassageStore::new(vec![
            Passage::new("g1", "", "Kel works at Zorbu."),
            Passage::new("g2", "", "Zorbu is in Tovan."),
        ])
        .unwrap();
        let qs = [q("a", &["g1", "g2"])];
        let rs = [r("a", &[&["g1", "g2"]])];
        let preds = [Prediction {
            question_id: "a".into(),
            answer: "Tovan".into(),
            span_prob: 1.0,
            rerank_prob: 1.0,
        }];
        let rep = build_report(Some(&rs), Some(&preds), &qs, &store, 10, false);
        assert_eq!(rep.answer_recall, Some(1.0));
        assert_eq!(rep.passage_recall, Some(1.0));
        assert_eq!(rep.chain_recall, Some(1.0));
        assert_eq!(rep.exact_match, Some(1.0));
        assert_eq!(rep.schema_version, REPORT_SCHEMA_VERSION);
    }

    proptest! {
        #[test]
        fn chain_recall_never_exceeds_passage_recall(
            golds in prop::collection::vec(prop::collection::vec(0u8..6, 1..3), 1..8),
            retrieved in prop::collection::vec(prop::collection::vec(prop::collection::vec(0u8..6, 1..3), 0..4), 1..8),
            single in any::<bool>(),
        ) {
            let qs: Vec<Question> = golds.iter().enumerate()
                .map(|(i, g)| Question::new(format!("q{i}"), "?", vec!["x".into()])
                    .with_gold(g.iter().map(|p| format!("p{p}")).collect()))
                .collect();
            let rs: Vec<Retrieval> = retrieved.iter().enumerate()
                .map(|(i, cs)| Retrieval::from_piece_lists(&format!("q{i}"),
                    cs.iter().map(|c| c.iter().map(|p| format!("p{p}")).collect()).collect()))
                .collect();
            let p = passage_recall(&rs, &qs).value;
            let c = chain_recall(&rs, &qs, single).value;
            prop_assert!(c <= p);
            prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&c));
        }
    }
}
