//! Lexical corpus index producing the top-k candidate pool.
//!
//! Scoring is Okapi BM25 with the non-negative idf
//! `ln(1 + (N - df + 0.5) / (df + 0.5))`. Title and text are indexed
//! together. Any other retriever can feed selection as long as it yields a
//! [`CandidatePool`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CandidatePool, ModelError, Passage};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("line {line}: malformed corpus record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("duplicate document id {0}")]
    DuplicateDocId(u64),
    #[error("the index holds no documents")]
    EmptyIndex,
    #[error("k must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Deserialize)]
struct CorpusRecord {
    id: u64,
    title: String,
    text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub params: Bm25Params,
    /// Sorted by id so ingestion order never matters.
    pub documents: Vec<Passage>,
    pub doc_freq: BTreeMap<String, usize>,
    pub doc_lengths: Vec<usize>,
    pub term_freqs: Vec<BTreeMap<String, u32>>,
    pub average_length: f64,
}

impl CorpusIndex {
    pub fn build(mut documents: Vec<Passage>, params: Bm25Params) -> Result<Self, RetrievalError> {
        documents.sort_by_key(|d| d.id);
        if let Some(w) = documents.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(RetrievalError::DuplicateDocId(w[0].id));
        }
        let mut doc_freq: BTreeMap<String, usize> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(documents.len());
        let mut term_freqs = Vec::with_capacity(documents.len());
        for doc in &documents {
            let tokens = tokenize(&format!("{} {}", doc.title, doc.text));
            doc_lengths.push(tokens.len());
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t).or_insert(0) += 1;
            }
            for term in tf.keys() {
                *doc_freq.entry(term.clone()).or_insert(0) += 1;
            }
            term_freqs.push(tf);
        }
        let average_length = if documents.is_empty() {
            0.0
        } else {
            doc_lengths.iter().sum::<usize>() as f64 / documents.len() as f64
        };
        Ok(Self {
            params,
            documents,
            doc_freq,
            doc_lengths,
            term_freqs,
            average_length,
        })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.documents.len() as f64;
        let df = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// BM25 score of document at storage position `doc` for the query.
    pub fn score(&self, doc: usize, query: &str) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let len_norm = if self.average_length > 0.0 {
            self.doc_lengths[doc] as f64 / self.average_length
        } else {
            0.0
        };
        let terms: HashSet<String> = tokenize(query).into_iter().collect();
        let mut terms: Vec<String> = terms.into_iter().collect();
        terms.sort();
        terms
            .iter()
            .filter_map(|t| {
                let tf = *self.term_freqs[doc].get(t)? as f64;
                Some(self.idf(t) * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len_norm)))
            })
            .sum()
    }

    /// Top `k` documents by score; ties go to the lower document id.
    pub fn retrieve(
        &self,
        query_id: &str,
        query: &str,
        k: usize,
    ) -> Result<CandidatePool, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        if self.documents.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        let mut scored: Vec<(usize, f64)> = (0..self.documents.len())
            .map(|i| (i, self.score(i, query)))
            .collect();
        // documents are id-sorted, so position order is id order
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let passages = scored
            .into_iter()
            .take(k)
            .map(|(i, s)| Passage {
                retrieval_score: Some(s),
                ..self.documents[i].clone()
            })
            .collect();
        Ok(CandidatePool::new(query_id, passages)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }
}

/// Reads `{"id", "title", "text"}` records, one per line. Blank lines are
/// skipped; line numbers in errors are 1-based.
pub fn ingest_corpus<R: BufRead>(
    source: R,
    params: Bm25Params,
) -> Result<CorpusIndex, RetrievalError> {
    let mut documents = Vec::new();
    let mut seen: HashMap<u64, usize> = HashMap::new();
    for (n, line) in source.lines().enumerate() {
        let line = line?;
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord =
            serde_json::from_str(&line).map_err(|e| RetrievalError::MalformedRecord {
                line: line_no,
                reason: e.to_string(),
            })?;
        if record.text.trim().is_empty() {
            return Err(RetrievalError::MalformedRecord {
                line: line_no,
                reason: "text is empty".into(),
            });
        }
        if seen.insert(record.id, line_no).is_some() {
            return Err(RetrievalError::DuplicateDocId(record.id));
        }
        documents.push(Passage::new(record.id, record.title, record.text));
    }
    CorpusIndex::build(documents, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(lines: &[&str]) -> Result<CorpusIndex, RetrievalError> {
        ingest_corpus(lines.join("\n").as_bytes(), Bm25Params::default())
    }

    const THREE: [&str; 3] = [
        r#"{"id": 1, "title": "A", "text": "apples and pears"}"#,
        r#"{"id": 2, "title": "B", "text": "zebra crossing"}"#,
        r#"{"id": 3, "title": "C", "text": "pears only"}"#,
    ];

    #[test]
    fn ingests_every_record() {
        assert_eq!(corpus(&THREE).unwrap().len(), 3);
    }

    #[test]
    fn missing_text_is_malformed() {
        let err = corpus(&[THREE[0], r#"{"id": 9, "title": "x"}"#]).unwrap_err();
        assert!(matches!(
            err,
            RetrievalError::MalformedRecord { line: 2, .. }
        ));
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let err = corpus(&[THREE[0], THREE[0]]).unwrap_err();
        assert!(matches!(err, RetrievalError::DuplicateDocId(1)));
    }

    #[test]
    fn only_match_ranks_first() {
        let index = corpus(&THREE).unwrap();
        let pool = index.retrieve("q", "zebra", 3).unwrap();
        assert_eq!(pool.passages[0].id, 2);
        // zero-score documents follow in id order
        assert_eq!(pool.passages[1].id, 1);
    }

    #[test]
    fn k_is_clamped_to_corpus() {
        let index = corpus(&THREE).unwrap();
        assert_eq!(index.retrieve("q", "pears", 50).unwrap().len(), 3);
        assert!(matches!(
            index.retrieve("q", "pears", 0),
            Err(RetrievalError::ZeroK)
        ));
    }

    #[test]
    fn empty_index() {
        let index = corpus(&[]).unwrap();
        assert!(matches!(
            index.retrieve("q", "x", 1),
            Err(RetrievalError::EmptyIndex)
        ));
    }

    #[test]
    fn single_document_score_matches_hand_evaluation() {
        let index = corpus(&[r#"{"id": 1, "title": "", "text": "alpha alpha beta"}"#]).unwrap();
        // N = 1, df = 1 for both terms: idf = ln(1 + 0.5 / 1.5) = ln(4/3)
        // dl = avgdl = 3, so the length normaliser is k1 = 1.2
        // alpha: tf 2 -> 2 * 2.2 / (2 + 1.2); beta: tf 1 -> 2.2 / 2.2
        let idf = (4.0f64 / 3.0).ln();
        let expected = idf * (2.0 * 2.2 / 3.2) + idf * (2.2 / 2.2);
        let pool = index.retrieve("q", "alpha beta", 1).unwrap();
        let got = pool.passages[0].retrieval_score.unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(tokenize("Hello, World-42!"), vec!["hello", "world", "42"]);
    }

    #[test]
    fn save_and_load() {
        let index = corpus(&THREE).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.json");
        index.save(&path).unwrap();
        assert_eq!(CorpusIndex::load(&path).unwrap(), index);
    }
}
