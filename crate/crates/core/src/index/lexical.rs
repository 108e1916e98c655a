use std::collections::HashMap;

use super::{rank_order, Hit};
use crate::data::{tokenize, PassageStore};
use crate::error::{Error, Result};

/// TF-IDF over `title + text`, cosine scoring through inverted postings.
#[derive(Debug, Clone)]
pub struct LexicalIndex {
    n: usize,
    terms: HashMap<String, usize>,
    df: Vec<usize>,
    idf: Vec<f64>,
    /// Passage ids ascending; row `i` belongs to `ids[i]`.
    ids: Vec<String>,
    positions: Vec<usize>,
    /// Per term: `(row, normalized weight)`.
    postings: Vec<Vec<(usize, f64)>>,
}

impl LexicalIndex {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn df(&self, term: &str) -> usize {
        self.terms.get(term).map_or(0, |&t| self.df[t])
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.terms.get(term).map(|&t| self.idf[t])
    }

    pub fn position(&self, row: usize) -> usize {
        self.positions[row]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// L2-normalized TF-IDF query vector over known terms.
    fn query_vector(&self, text: &str) -> Vec<(usize, f64)> {
        let mut tf: HashMap<usize, f64> = HashMap::new();
        for tok in tokenize(text) {
            if let Some(&t) = self.terms.get(&tok) {
                *tf.entry(t).or_default() += 1.0;
            }
        }
        let mut v: Vec<(usize, f64)> = tf.into_iter().map(|(t, c)| (t, c * self.idf[t])).collect();
        v.sort_by_key(|x| x.0);
        let norm = v.iter().map(|x| x.1 * x.1).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| x.1 /= norm);
        }
        v
    }

    /// Top `k` rows as `(row, cosine)`, descending, ties by ascending id.
    pub fn search_rows(&self, text: &str, k: usize) -> Vec<(usize, f64)> {
        let k = k.min(self.n);
        if k == 0 {
            return Vec::new();
        }
        let mut scores = vec![0.0; self.n];
        for (t, w) in self.query_vector(text) {
            for &(row, pw) in &self.postings[t] {
                scores[row] += w * pw;
            }
        }
        let mut scored: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, rank_order);
            scored.truncate(k);
        }
        scored.sort_by(rank_order);
        scored
    }
}

pub fn build_lexical_index(store: &PassageStore) -> Result<LexicalIndex> {
    if store.is_empty() {
        return Err(Error::InvalidData("cannot index an empty corpus".into()));
    }
    let mut positions: Vec<usize> = (0..store.len()).collect();
    positions.sort_by(|&a, &b| store.at(a).id.cmp(&store.at(b).id));

    let mut terms: HashMap<String, usize> = HashMap::new();
    let mut counts: Vec<Vec<(usize, f64)>> = Vec::with_capacity(store.len());
    for &p in &positions {
        let passage = store.at(p);
        let mut tf: HashMap<usize, f64> = HashMap::new();
        for tok in tokenize(&passage.title).into_iter().chain(tokenize(&passage.text)) {
            let next = terms.len();
            let t = *terms.entry(tok).or_insert(next);
            *tf.entry(t).or_default() += 1.0;
        }
        let mut row: Vec<(usize, f64)> = tf.into_iter().collect();
        row.sort_by_key(|x| x.0);
        counts.push(row);
    }

    let n = store.len();
    let mut df = vec![0usize; terms.len()];
    for row in &counts {
        for &(t, _) in row {
            df[t] += 1;
        }
    }
    let idf: Vec<f64> = df
        .iter()
        .map(|&d| ((n as f64 + 1.0) / (d as f64 + 1.0)).ln() + 1.0)
        .collect();

    let mut postings = vec![Vec::new(); terms.len()];
    for (row, tf) in counts.iter().enumerate() {
        let weights: Vec<(usize, f64)> = tf.iter().map(|&(t, c)| (t, c * idf[t])).collect();
        let norm = weights.iter().map(|x| x.1 * x.1).sum::<f64>().sqrt();
        for (t, w) in weights {
            postings[t].push((row, if norm > 0.0 { w / norm } else { 0.0 }));
        }
    }

    Ok(LexicalIndex {
        n,
        terms,
        df,
        idf,
        ids: positions.iter().map(|&p| store.at(p).id.clone()).collect(),
        positions,
        postings,
    })
}

pub fn lexical_search(index: &LexicalIndex, query_text: &str, k: usize) -> Vec<Hit> {
    index
        .search_rows(query_text, k)
        .into_iter()
        .map(|(row, score)| Hit {
            id: index.ids[row].clone(),
            score,
        })
        .collect()
}
