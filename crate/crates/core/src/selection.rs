//! Expand-then-Refine evidence selection.
//!
//! 1. **Expand** asks the model for standalone sub-queries of the question.
//! 2. **Select** shows the whole pool with the question and all sub-queries and
//!    parses the `### Final Selection: [i] [j]` line into a raw set.
//! 3. **Refine** shows only the raw set's passages, renumbered from 1, with
//!    the original question alone, and maps the answer back to pool positions.
//!
//! Every stage regenerates up to `max_retries` times when its output cannot
//! be parsed; backend errors are returned immediately.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, DecodingParams, LlmBackend};
use crate::model::{CandidatePool, EvidenceSet, ModelError, SelectionTrace, SubQueries};
use crate::prompts::{
    join_answers, render_context, render_prompt, Bindings, PromptError, PromptSet, TemplateName,
};

pub const SELECTION_MARKER: &str = "### Final Selection:";
pub const QUERIES_MARKER: &str = "### Queries:";

static BRACKET_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\[\s*(\d+)\s*\]").expect("valid regex"));

fn default_max_retries() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsrConfig {
    /// Show the gold answers to the selector (training-data mode).
    #[serde(default)]
    pub use_answer: bool,
    #[serde(default)]
    pub decoding: DecodingParams,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Select once per query in `{q} ∪ sub-queries` and take the union,
    /// instead of one call listing every sub-query.
    #[serde(default)]
    pub per_subquery_union: bool,
    /// Skip expansion and select with an empty sub-query list.
    #[serde(default)]
    pub skip_expand: bool,
}

impl Default for EsrConfig {
    fn default() -> Self {
        Self {
            use_answer: false,
            decoding: DecodingParams::sampling(),
            max_retries: default_max_retries(),
            per_subquery_union: false,
            skip_expand: false,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("no '{SELECTION_MARKER}' marker")]
    NoMarker,
    #[error("no bracketed passage numbers after the marker")]
    NoValidIndices,
    #[error("passage number {0} is outside the pool")]
    OutOfRange(usize),
    #[error("no '{QUERIES_MARKER}' marker")]
    NoQueriesMarker,
    #[error("no queries after the marker")]
    NoQueries,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EsrStage {
    Expand,
    Select,
    Refine,
}

impl EsrStage {
    pub fn as_str(self) -> &'static str {
        match self {
            EsrStage::Expand => "expand",
            EsrStage::Select => "select",
            EsrStage::Refine => "refine",
        }
    }
}

impl fmt::Display for EsrStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("{stage} output unparseable after {attempts} attempts: {last}")]
    ParseFailure {
        stage: EsrStage,
        attempts: u32,
        last: ParseError,
    },
    #[error("question is empty")]
    EmptyQuestion,
    #[error("raw evidence set is empty")]
    EmptyRawSet,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A selection error tagged with the stage that raised it.
#[derive(Debug, Error)]
#[error("{stage} stage failed: {source}")]
pub struct EsrError {
    pub stage: EsrStage,
    #[source]
    pub source: SelectionError,
}

impl EsrError {
    pub fn is_backend(&self) -> bool {
        matches!(self.source, SelectionError::Backend(_))
    }
}

/// Parses the last `### Final Selection:` line into unique 1-based indices.
///
/// Indices outside `1..=pool_size` are dropped; [`ParseError::OutOfRange`]
/// is returned only when nothing valid remains. Duplicates keep their first
/// occurrence.
pub fn parse_final_selection(text: &str, pool_size: usize) -> Result<Vec<usize>, ParseError> {
    let start = text.rfind(SELECTION_MARKER).ok_or(ParseError::NoMarker)?;
    let rest = &text[start + SELECTION_MARKER.len()..];
    // the selection normally sits on the marker's line; tolerate a line break
    let line = rest
        .lines()
        .find(|l| !l.trim().is_empty())
        .unwrap_or_default();
    let mut indices = Vec::new();
    let mut first_bad = None;
    for cap in BRACKET_RE.captures_iter(line) {
        match cap[1].parse::<usize>() {
            Ok(i) if (1..=pool_size).contains(&i) => {
                if !indices.contains(&i) {
                    indices.push(i);
                }
            }
            Ok(i) => {
                first_bad.get_or_insert(i);
            }
            Err(_) => {
                first_bad.get_or_insert(usize::MAX);
            }
        }
    }
    match (indices.is_empty(), first_bad) {
        (false, _) => Ok(indices),
        (true, Some(bad)) => Err(ParseError::OutOfRange(bad)),
        (true, None) => Err(ParseError::NoValidIndices),
    }
}

/// The canonical selection line for `indices`, e.g. `### Final Selection: [2] [1].\n`.
pub fn render_final_selection(indices: &[usize]) -> String {
    let brackets: Vec<String> = indices.iter().map(|i| format!("[{i}]")).collect();
    format!("{SELECTION_MARKER} {}.\n", brackets.join(" "))
}

/// Parses the lines after the last `### Queries:` marker.
pub fn parse_queries(text: &str) -> Result<Vec<String>, ParseError> {
    let start = text
        .rfind(QUERIES_MARKER)
        .ok_or(ParseError::NoQueriesMarker)?;
    let rest = text[start + QUERIES_MARKER.len()..].replace("\\n", "\n");
    let queries: Vec<String> = rest
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if queries.is_empty() {
        return Err(ParseError::NoQueries);
    }
    Ok(queries)
}

/// Runs the three stages against one backend.
pub struct Selector<'a> {
    backend: &'a dyn LlmBackend,
    prompts: &'a PromptSet,
    cfg: &'a EsrConfig,
}

impl<'a> Selector<'a> {
    pub fn new(backend: &'a dyn LlmBackend, prompts: &'a PromptSet, cfg: &'a EsrConfig) -> Self {
        Self {
            backend,
            prompts,
            cfg,
        }
    }

    fn answers_binding(&self, bindings: &mut Bindings, gold: Option<&[String]>) {
        if !self.cfg.use_answer {
            return;
        }
        if let Some(gold) = gold.filter(|g| !g.is_empty()) {
            bindings.set("answers", join_answers(gold));
        }
    }

    fn generate_parsed<T>(
        &self,
        stage: EsrStage,
        prompt: &str,
        parse: impl Fn(&str) -> Result<T, ParseError>,
    ) -> Result<(T, String), SelectionError> {
        let attempts = self.cfg.max_retries + 1;
        let mut last = ParseError::NoMarker;
        for attempt in 0..attempts {
            let params = self
                .cfg
                .decoding
                .with_seed(self.cfg.decoding.seed.wrapping_add(attempt as u64));
            let text = self.backend.generate(prompt, &params)?;
            match parse(&text) {
                Ok(value) => return Ok((value, text)),
                Err(e) => {
                    log::debug!("{stage} attempt {} unparseable: {e}", attempt + 1);
                    last = e;
                }
            }
        }
        Err(SelectionError::ParseFailure {
            stage,
            attempts,
            last,
        })
    }

    /// Decomposes `question` into standalone sub-queries.
    pub fn expand(
        &self,
        question: &str,
        gold: Option<&[String]>,
    ) -> Result<(SubQueries, String), SelectionError> {
        if question.trim().is_empty() {
            return Err(SelectionError::EmptyQuestion);
        }
        let mut bindings = Bindings::new().with("question", question);
        self.answers_binding(&mut bindings, gold);
        let prompt = render_prompt(self.prompts.get(TemplateName::Expand), &bindings)?;
        let (queries, text) = self.generate_parsed(EsrStage::Expand, &prompt, parse_queries)?;
        Ok((SubQueries::new(queries), text))
    }

    fn select_once(
        &self,
        question: &str,
        queries: &[String],
        pool: &CandidatePool,
        gold: Option<&[String]>,
    ) -> Result<(Vec<usize>, String), SelectionError> {
        let mut bindings = Bindings::new()
            .with("num", pool.len().to_string())
            .with("question", question)
            .with("context", render_context(&pool.passages))
            .with("queries", queries.join("\n"));
        self.answers_binding(&mut bindings, gold);
        let prompt = render_prompt(self.prompts.get(TemplateName::Select), &bindings)?;
        self.generate_parsed(EsrStage::Select, &prompt, |t| {
            parse_final_selection(t, pool.len())
        })
    }

    /// Selects a raw evidence set from the full pool.
    pub fn select(
        &self,
        question: &str,
        subqueries: &SubQueries,
        pool: &CandidatePool,
        gold: Option<&[String]>,
    ) -> Result<(EvidenceSet, String), SelectionError> {
        pool.validate()?;
        if !self.cfg.per_subquery_union {
            let (indices, text) = self.select_once(question, &subqueries.queries, pool, gold)?;
            return Ok((EvidenceSet::raw(indices), text));
        }
        let mut union: Vec<usize> = Vec::new();
        let mut texts = Vec::new();
        let all = std::iter::once(question.to_string()).chain(subqueries.queries.iter().cloned());
        for q in all {
            let (indices, text) = self.select_once(&q, &[], pool, gold)?;
            for i in indices {
                if !union.contains(&i) {
                    union.push(i);
                }
            }
            texts.push(text);
        }
        Ok((EvidenceSet::raw(union), texts.join("\n\n")))
    }

    /// Re-selects from the raw set using only the original question.
    pub fn refine(
        &self,
        question: &str,
        raw: &EvidenceSet,
        pool: &CandidatePool,
        gold: Option<&[String]>,
    ) -> Result<(EvidenceSet, String), SelectionError> {
        if raw.is_empty() {
            return Err(SelectionError::EmptyRawSet);
        }
        let sub_pool = pool.sub_pool(&raw.indices)?;
        let mut bindings = Bindings::new()
            .with("num", sub_pool.len().to_string())
            .with("question", question)
            .with("context", render_context(&sub_pool.passages));
        self.answers_binding(&mut bindings, gold);
        let prompt = render_prompt(self.prompts.get(TemplateName::Refine), &bindings)?;
        let (sub_indices, text) = self.generate_parsed(EsrStage::Refine, &prompt, |t| {
            parse_final_selection(t, sub_pool.len())
        })?;
        let indices = sub_indices.iter().map(|&s| raw.indices[s - 1]).collect();
        Ok((EvidenceSet::refined(indices, raw), text))
    }

    /// Expand, select and refine in sequence.
    pub fn esr(
        &self,
        query_id: &str,
        question: &str,
        pool: &CandidatePool,
        gold: Option<&[String]>,
    ) -> Result<(EvidenceSet, SelectionTrace), EsrError> {
        let tag = |stage| move |source| EsrError { stage, source };
        let mut llm_texts = BTreeMap::new();
        let subqueries = if self.cfg.skip_expand {
            if question.trim().is_empty() {
                return Err(tag(EsrStage::Expand)(SelectionError::EmptyQuestion));
            }
            SubQueries::default()
        } else {
            let (subqueries, text) = self.expand(question, gold).map_err(tag(EsrStage::Expand))?;
            llm_texts.insert(EsrStage::Expand.to_string(), text);
            subqueries
        };
        let (raw, text) = self
            .select(question, &subqueries, pool, gold)
            .map_err(tag(EsrStage::Select))?;
        llm_texts.insert(EsrStage::Select.to_string(), text);
        let (refined, text) = self
            .refine(question, &raw, pool, gold)
            .map_err(tag(EsrStage::Refine))?;
        llm_texts.insert(EsrStage::Refine.to_string(), text);
        let trace = SelectionTrace {
            query_id: query_id.to_string(),
            subqueries,
            raw_set: raw,
            refined_set: refined.clone(),
            llm_texts,
            decoding: self.cfg.decoding,
        };
        Ok((refined, trace))
    }
}

/// Runs the full pipeline once.
pub fn esr(
    backend: &dyn LlmBackend,
    prompts: &PromptSet,
    query_id: &str,
    question: &str,
    pool: &CandidatePool,
    gold: Option<&[String]>,
    cfg: &EsrConfig,
) -> Result<(EvidenceSet, SelectionTrace), EsrError> {
    Selector::new(backend, prompts, cfg).esr(query_id, question, pool, gold)
}
