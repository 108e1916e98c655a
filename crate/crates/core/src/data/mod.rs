//! Corpus and question data model, tokenization, JSONL formats and the
//! synthetic multi-hop world generator.

mod synth;
mod tokenize;
mod vocab;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub use synth::{generate_synthetic, GenConfig};
pub use tokenize::{tokenize, tokenize_with_offsets, Token};
pub use vocab::{build_vocab, Vocabulary, UNK_ID};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub title: String,
    pub text: String,
}

impl Passage {
    pub fn new(id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    #[serde(rename = "question")]
    pub text: String,
    pub answers: Vec<String>,
    /// Evaluation-only evidence annotation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_chain: Option<Vec<String>>,
}

impl Question {
    pub fn new(id: impl Into<String>, text: impl Into<String>, answers: Vec<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            answers,
            gold_chain: None,
        }
    }

    pub fn with_gold(mut self, chain: Vec<String>) -> Self {
        self.gold_chain = Some(chain);
        self
    }

    /// Copy with the evaluation-only gold chain removed.
    pub fn without_gold(&self) -> Self {
        Self {
            gold_chain: None,
            ..self.clone()
        }
    }
}

/// The retrievable corpus. Keeps insertion order; lookups by id are O(1).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PassageStore {
    passages: Vec<Passage>,
    by_id: HashMap<String, usize>,
}

impl PassageStore {
    pub fn new(passages: Vec<Passage>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            if p.id.is_empty() {
                return Err(Error::InvalidData(format!("passage #{i} has an empty id")));
            }
            if p.text.is_empty() {
                return Err(Error::InvalidData(format!("passage `{}` has empty text", p.id)));
            }
            if by_id.insert(p.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(p.id.clone()));
            }
        }
        Ok(Self { passages, by_id })
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.by_id.get(id).map(|&i| &self.passages[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn at(&self, i: usize) -> &Passage {
        &self.passages[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Passage> {
        self.passages.iter()
    }

    pub fn as_slice(&self) -> &[Passage] {
        &self.passages
    }

    pub fn resolve(&self, ids: &[String]) -> Result<Vec<&Passage>> {
        ids.iter()
            .map(|id| self.get(id).ok_or_else(|| Error::UnknownPassage(id.clone())))
            .collect()
    }
}

/// Vocabulary ids of every passage's `title + text`, aligned with store order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusTokens {
    ids: Vec<Vec<u32>>,
}

impl CorpusTokens {
    pub fn new(vocab: &Vocabulary, store: &PassageStore) -> Self {
        Self {
            ids: store.iter().map(|p| passage_token_ids(vocab, p)).collect(),
        }
    }

    pub fn get(&self, position: usize) -> &[u32] {
        &self.ids[position]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Token ids of `question` followed by each piece, the bag form of a
    /// composed multi-hop query.
    pub fn compose(&self, question: &[u32], pieces: &[usize]) -> Vec<u32> {
        let mut out = question.to_vec();
        for &p in pieces {
            out.extend_from_slice(&self.ids[p]);
        }
        out
    }
}

pub fn passage_token_ids(vocab: &Vocabulary, passage: &Passage) -> Vec<u32> {
    let mut ids = vocab.encode(&passage.title);
    ids.extend(vocab.encode(&passage.text));
    ids
}

/// A corpus with its train and dev question splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub passages: PassageStore,
    pub train: Vec<Question>,
    pub dev: Vec<Question>,
}

pub const PASSAGES_FILE: &str = "passages.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const DEV_FILE: &str = "dev.jsonl";

impl Dataset {
    pub fn load_dir(dir: &Path) -> Result<Self> {
        Ok(Self {
            passages: load_passages(&dir.join(PASSAGES_FILE))?,
            train: load_questions(&dir.join(TRAIN_FILE))?,
            dev: load_questions(&dir.join(DEV_FILE))?,
        })
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_passages(&dir.join(PASSAGES_FILE), &self.passages)?;
        save_questions(&dir.join(TRAIN_FILE), &self.train)?;
        save_questions(&dir.join(DEV_FILE), &self.dev)
    }

    /// Checks gold chains against the corpus and the expected hop count.
    pub fn validate(&self, hops: usize) -> Result<()> {
        for q in self.train.iter().chain(&self.dev) {
            if let Some(chain) = &q.gold_chain {
                if chain.len() != hops {
                    return Err(Error::InvalidData(format!(
                        "question `{}` gold chain has {} pieces, expected {hops}",
                        q.id,
                        chain.len()
                    )));
                }
                self.passages.resolve(chain)?;
            }
        }
        Ok(())
    }

    pub fn all_questions(&self) -> Vec<Question> {
        self.train.iter().chain(&self.dev).cloned().collect()
    }
}

pub(crate) fn read_jsonl<T, F>(path: &Path, mut check: F) -> Result<Vec<T>>
where
    T: for<'de> Deserialize<'de>,
    F: FnMut(&T, usize) -> Result<()>,
{
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        check(&record, i + 1)?;
        out.push(record);
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, &r)
            .map_err(|e| Error::InvalidData(format!("serialize: {e}")))?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn load_passages(path: &Path) -> Result<PassageStore> {
    let passages = read_jsonl::<Passage, _>(path, |_, _| Ok(()))?;
    PassageStore::new(passages)
}

pub fn save_passages(path: &Path, store: &PassageStore) -> Result<()> {
    write_jsonl(path, store.iter())
}

pub fn load_questions(path: &Path) -> Result<Vec<Question>> {
    let mut seen = HashSet::new();
    read_jsonl::<Question, _>(path, |q, line| {
        if q.answers.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("question `{}` has empty answers", q.id),
            });
        }
        if !seen.insert(q.id.clone()) {
            return Err(Error::DuplicateId(q.id.clone()));
        }
        Ok(())
    })
}

pub fn save_questions(path: &Path, questions: &[Question]) -> Result<()> {
    write_jsonl(path, questions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn missing_answers_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "q.jsonl",
            "{\"id\":\"a\",\"question\":\"x\",\"answers\":[\"y\"]}\n{\"id\":\"b\",\"question\":\"x\"}\n",
        );
        let err = load_questions(&p).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_answers_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "q.jsonl", "{\"id\":\"a\",\"question\":\"x\",\"answers\":[]}\n");
        assert!(matches!(load_questions(&p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "p.jsonl",
            "{\"id\":\"a\",\"title\":\"t\",\"text\":\"x\"}\n{\"id\":\"a\",\"title\":\"t\",\"text\":\"y\"}\n",
        );
        assert!(matches!(load_passages(&p), Err(Error::DuplicateId(id)) if id == "a"));
        let q = write(
            dir.path(),
            "q.jsonl",
            "{\"id\":\"a\",\"question\":\"x\",\"answers\":[\"y\"]}\n{\"id\":\"a\",\"question\":\"z\",\"answers\":[\"y\"]}\n",
        );
        assert!(matches!(load_questions(&q), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn malformed_json_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "p.jsonl", "{\"id\":\"a\",\"title\":\"t\",\"text\":\"x\"}\n{oops\n");
        assert!(matches!(load_passages(&p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn gold_chain_is_optional_on_the_wire() {
        let q = Question::new("q", "text", vec!["a".into()]);
        let s = serde_json::to_string(&q).unwrap();
        assert!(!s.contains("gold_chain"));
        assert_eq!(s, r#"{"id":"q","question":"text","answers":["a"]}"#);
    }
}
