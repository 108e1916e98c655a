use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::tokenize::tokenize;
use super::{PassageStore, Question};

pub const UNK_ID: u32 = 0;

/// Token→id map. Id 0 is the unknown token; known tokens get ids `1..=n`
/// in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = tokens.into_iter().map(Into::into).collect();
        let tokens: Vec<String> = set.into_iter().collect();
        let mut v = Self {
            tokens,
            ids: HashMap::new(),
        };
        v.reindex();
        v
    }

    fn reindex(&mut self) {
        self.ids = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32 + 1))
            .collect();
    }

    /// Number of rows an embedding table needs, including UNK.
    pub fn size(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn known(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        if id == UNK_ID {
            None
        } else {
            self.tokens.get(id as usize - 1).map(String::as_str)
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Restores the lookup table after deserialization.
    pub fn rebuild_index(&mut self) {
        self.reindex();
    }
}

pub fn build_vocab(passages: &PassageStore, questions: &[Question]) -> Vocabulary {
    let mut all = BTreeSet::new();
    for p in passages.iter() {
        all.extend(tokenize(&p.title));
        all.extend(tokenize(&p.text));
    }
    for q in questions {
        all.extend(tokenize(&q.text));
    }
    Vocabulary::from_tokens(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Passage;

    fn store(texts: &[&str]) -> PassageStore {
        PassageStore::new(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| Passage::new(format!("p{i}"), "", *t))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn collects_tokens_from_passages_and_questions() {
        let s = store(&["a b", "b c"]);
        let q = vec![Question::new("q0", "c d", vec!["x".into()])];
        let v = build_vocab(&s, &q);
        assert_eq!(v.known(), 4);
        assert_eq!(v.size(), 5);
        assert_eq!(v.id("a"), 1);
        assert_eq!(v.id("d"), 4);
        assert_eq!(v.id("zzz"), UNK_ID);
        assert_eq!(v.token(2), Some("b"));
    }

    #[test]
    fn empty_inputs_give_only_unk() {
        let v = build_vocab(&PassageStore::default(), &[]);
        assert_eq!(v.size(), 1);
        assert_eq!(v.known(), 0);
    }

    #[test]
    fn id_assignment_is_deterministic() {
        let s = store(&["zeta alpha", "mu"]);
        let a = build_vocab(&s, &[]);
        let b = build_vocab(&s, &[]);
        assert_eq!(a, b);
        for t in ["alpha", "mu", "zeta"] {
            assert_eq!(a.id(t), b.id(t));
        }
    }

    #[test]
    fn serde_round_trip_restores_lookup() {
        let v = Vocabulary::from_tokens(["b", "a"]);
        let mut back: Vocabulary = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        back.rebuild_index();
        assert_eq!(back, v);
        assert_eq!(back.id("b"), 2);
    }
}
