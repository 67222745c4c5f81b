//! Answer quality, evidence size and evidence novelty.
//!
//! Answers are compared after the usual open-domain QA normalization
//! (lowercase, ASCII punctuation removed, articles dropped, whitespace
//! collapsed). EM is containment of a gold answer in the prediction.
//! Novelty averages each passage's marginal gain `1 − max Sim` over the
//! passages selected before it.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, DecodingParams, LlmBackend};
use crate::model::{CandidatePool, EvidenceSet, ModelError, Passage, QAExample};
use crate::prompts::{render_context, render_prompt, Bindings, PromptError, PromptTemplate};
use crate::retrieval::tokenize;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no selection for query {0}")]
    MissingSelection(String),
    #[error("no candidate pool for query {0}")]
    MissingPool(String),
    #[error("novelty of an empty set is undefined")]
    EmptySet,
    #[error("embedding similarity needs a backend")]
    NoBackend,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

pub fn normalize_answer(text: &str) -> String {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !ARTICLES.contains(w))
        .collect::<Vec<_>>()
        .join(" ")
}

/// 1 when some normalized gold answer is a substring of the normalized
/// prediction.
pub fn em_contains(prediction: &str, golds: &[String]) -> u8 {
    let pred = normalize_answer(prediction);
    u8::from(golds.iter().any(|g| pred.contains(&normalize_answer(g))))
}

fn f1_pair(prediction: &str, gold: &str) -> f64 {
    let pred = normalize_answer(prediction);
    let gold = normalize_answer(gold);
    let p: Vec<&str> = pred.split_whitespace().collect();
    let g: Vec<&str> = gold.split_whitespace().collect();
    if p.is_empty() || g.is_empty() {
        return f64::from(u8::from(p.is_empty() && g.is_empty()));
    }
    let mut counts: BTreeMap<&str, i64> = BTreeMap::new();
    for t in &g {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Best token-multiset F1 of the prediction against any gold answer.
pub fn f1_token(prediction: &str, golds: &[String]) -> f64 {
    golds
        .iter()
        .map(|g| f1_pair(prediction, g))
        .fold(0.0, f64::max)
}

/// Greedy answer to `question` given the set's passages as context.
pub fn answer_with_set(
    backend: &dyn LlmBackend,
    question: &str,
    set: &EvidenceSet,
    pool: &CandidatePool,
    answer_prompt: &PromptTemplate,
    decoding: &DecodingParams,
) -> Result<String, MetricsError> {
    set.validate(pool.len())?;
    let mut bindings = Bindings::new().with("question", question);
    if !set.is_empty() {
        bindings.set("context", render_context(pool.select(&set.indices)));
    }
    let prompt = render_prompt(answer_prompt, &bindings)?;
    Ok(backend.generate(&prompt, decoding)?.trim().to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    #[default]
    Jaccard,
    EmbeddingCosine,
}

impl SimilarityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SimilarityKind::Jaccard => "jaccard",
            SimilarityKind::EmbeddingCosine => "embedding_cosine",
        }
    }
}

impl fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Jaccard index of the lowercase alphanumeric token sets; 1 when both are
/// empty.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let a: HashSet<String> = tokenize(a).into_iter().collect();
    let b: HashSet<String> = tokenize(b).into_iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// `(1 + cos) / 2`, clipped to `[0, 1]`. A zero vector has cosine 0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos = if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    };
    ((1.0 + cos) / 2.0).clamp(0.0, 1.0)
}

/// Similarity of two passages' texts.
pub fn similarity(
    a: &Passage,
    b: &Passage,
    kind: SimilarityKind,
    backend: Option<&dyn LlmBackend>,
) -> Result<f64, MetricsError> {
    match kind {
        SimilarityKind::Jaccard => Ok(jaccard(&a.text, &b.text)),
        SimilarityKind::EmbeddingCosine => {
            let backend = backend.ok_or(MetricsError::NoBackend)?;
            Ok(cosine_similarity(
                &backend.embed(&a.text)?,
                &backend.embed(&b.text)?,
            ))
        }
    }
}

/// Mean marginal gain of the passages in selection order.
pub fn novelty(
    passages: &[&Passage],
    kind: SimilarityKind,
    backend: Option<&dyn LlmBackend>,
) -> Result<f64, MetricsError> {
    if passages.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let embeddings = match kind {
        SimilarityKind::Jaccard => None,
        SimilarityKind::EmbeddingCosine => {
            let backend = backend.ok_or(MetricsError::NoBackend)?;
            Some(
                passages
                    .iter()
                    .map(|p| backend.embed(&p.text))
                    .collect::<Result<Vec<_>, _>>()?,
            )
        }
    };
    let sim = |i: usize, j: usize| match &embeddings {
        Some(e) => cosine_similarity(&e[i], &e[j]),
        None => jaccard(&passages[i].text, &passages[j].text),
    };
    let mut total = 1.0;
    for i in 1..passages.len() {
        let max = (0..i).map(|j| sim(i, j)).fold(0.0, f64::max);
        total += 1.0 - max;
    }
    Ok(total / passages.len() as f64)
}

/// Novelty means over all queries and over queries with exactly 2 or 3
/// selected passages. `None` marks an empty stratum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoveltyReport {
    pub novel_all: Option<f64>,
    pub novel_2: Option<f64>,
    pub novel_3: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Builds the report from `(novelty, set size)` pairs, one per query.
pub fn novelty_report(items: &[(f64, usize)]) -> NoveltyReport {
    NoveltyReport {
        novel_all: mean(items.iter().map(|i| i.0)),
        novel_2: mean(items.iter().filter(|i| i.1 == 2).map(|i| i.0)),
        novel_3: mean(items.iter().filter(|i| i.1 == 3).map(|i| i.0)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: String,
    pub prediction: String,
    pub em: u8,
    pub f1: f64,
    pub doc_count: usize,
    pub novelty: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default)]
    pub similarity: SimilarityKind,
    #[serde(default = "DecodingParams::greedy")]
    pub decoding: DecodingParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            similarity: SimilarityKind::Jaccard,
            decoding: DecodingParams::greedy(),
        }
    }
}

/// Answers every question with its selection and scores the result.
///
/// Records follow the dataset order.
pub fn evaluate_run(
    backend: &dyn LlmBackend,
    dataset: &[QAExample],
    pools: &BTreeMap<String, CandidatePool>,
    selections: &BTreeMap<String, Vec<usize>>,
    answer_prompt: &PromptTemplate,
    cfg: &EvalConfig,
) -> Result<Vec<EvalRecord>, MetricsError> {
    if let Some(missing) = dataset.iter().find(|e| !selections.contains_key(&e.id)) {
        return Err(MetricsError::MissingSelection(missing.id.clone()));
    }
    let mut records = Vec::with_capacity(dataset.len());
    for example in dataset {
        let indices = &selections[&example.id];
        let pool = pools
            .get(&example.id)
            .ok_or_else(|| MetricsError::MissingPool(example.id.clone()))?;
        let set = EvidenceSet::raw(indices.clone());
        let prediction = answer_with_set(
            backend,
            &example.question,
            &set,
            pool,
            answer_prompt,
            &cfg.decoding,
        )?;
        let novelty = if set.is_empty() {
            None
        } else {
            Some(novelty(
                &pool.select(indices),
                cfg.similarity,
                Some(backend),
            )?)
        };
        records.push(EvalRecord {
            query_id: example.id.clone(),
            em: em_contains(&prediction, &example.answers),
            f1: f1_token(&prediction, &example.answers),
            prediction,
            doc_count: indices.len(),
            novelty,
        });
    }
    Ok(records)
}

/// Run-level means: EM and F1 in percent, documents per query, novelty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub run_id: String,
    pub n_queries: usize,
    pub em: f64,
    pub f1: f64,
    pub avg_doc: f64,
    pub novelty: NoveltyReport,
    pub sim_kind: SimilarityKind,
}

pub fn aggregate(run_id: &str, records: &[EvalRecord], sim_kind: SimilarityKind) -> AggregateRow {
    let n = records.len();
    let novelty_items: Vec<(f64, usize)> = records
        .iter()
        .filter_map(|r| r.novelty.map(|v| (v, r.doc_count)))
        .collect();
    AggregateRow {
        run_id: run_id.to_string(),
        n_queries: n,
        em: mean(records.iter().map(|r| f64::from(r.em))).map_or(0.0, |m| m * 100.0),
        f1: mean(records.iter().map(|r| r.f1)).map_or(0.0, |m| m * 100.0),
        avg_doc: mean(records.iter().map(|r| r.doc_count as f64)).unwrap_or(0.0),
        novelty: novelty_report(&novelty_items),
        sim_kind,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub const AGGREGATE_HEADER: [&str; 9] = [
    "run_id",
    "n_queries",
    "em",
    "f1",
    "avg_doc",
    "novel_all",
    "novel_2",
    "novel_3",
    "sim_kind",
];

pub const PER_QUERY_HEADER: [&str; 6] =
    ["query_id", "prediction", "em", "f1", "doc_count", "novelty"];

pub fn write_aggregate_csv<W: Write>(writer: W, rows: &[AggregateRow]) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(AGGREGATE_HEADER)?;
    for r in rows {
        w.write_record([
            r.run_id.clone(),
            r.n_queries.to_string(),
            r.em.to_string(),
            r.f1.to_string(),
            r.avg_doc.to_string(),
            opt(r.novelty.novel_all),
            opt(r.novelty.novel_2),
            opt(r.novelty.novel_3),
            r.sim_kind.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_per_query_csv<W: Write>(
    writer: W,
    records: &[EvalRecord],
) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(PER_QUERY_HEADER)?;
    for r in records {
        w.write_record([
            r.query_id.clone(),
            r.prediction.clone(),
            r.em.to_string(),
            r.f1.to_string(),
            r.doc_count.to_string(),
            opt(r.novelty),
        ])?;
    }
    w.flush()?;
    Ok(())
}
