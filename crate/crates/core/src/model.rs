//! Shared data model: passages, pools, evidence sets, utility labels and
//! training instances.
//!
//! Evidence sets address passages by their 1-based position in a
//! [`CandidatePool`]; those positions are the `[i]` identifiers the selector
//! sees in its prompt. Corpus ids are carried on [`Passage`] but never used as
//! set indices.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::DecodingParams;

/// Default upper bound on the number of passages in a candidate pool.
pub const DEFAULT_MAX_POOL: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("candidate pool holds {len} passages, more than the maximum of {max}")]
    PoolTooLarge { len: usize, max: usize },
    #[error("passage id {0} appears more than once in the pool")]
    DuplicatePassage(u64),
    #[error("passage id {0} has empty text")]
    EmptyPassageText(u64),
    #[error("set index {index} is outside the pool of {pool_len} passages")]
    IndexOutOfPool { index: usize, pool_len: usize },
    #[error("set index {0} appears more than once")]
    DuplicateIndex(usize),
    #[error("refined set is not a subset of its raw set")]
    NotSubset,
    #[error("instance has {0} labeled sets, at least 2 are required")]
    EmptySetList(usize),
    #[error(
        "best_index {found} does not point at the highest preference score (expected {expected})"
    )]
    BestIndexMismatch { found: usize, expected: usize },
    #[error("invalid utility signal: {0}")]
    InvalidSignal(String),
    #[error("preference map parameter {name}={value} outside [0.01, 10]")]
    ParamOutOfBounds { name: &'static str, value: f64 },
    #[error("QA example {0} has no gold answers")]
    NoAnswers(String),
    #[error("score vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("score vector contains a non-finite value")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub id: u64,
    pub title: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval_score: Option<f64>,
}

impl Passage {
    pub fn new(id: u64, title: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id,
            title: title.into(),
            text: text.into(),
            retrieval_score: None,
        }
    }
}

/// The ordered top-k passages handed to selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub query_id: String,
    pub passages: Vec<Passage>,
}

impl CandidatePool {
    /// Builds a pool, checking that it is non-empty, ids are unique and every
    /// passage has text.
    pub fn new(query_id: impl Into<String>, passages: Vec<Passage>) -> Result<Self, ModelError> {
        let pool = Self {
            query_id: query_id.into(),
            passages,
        };
        pool.validate()?;
        Ok(pool)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.passages.is_empty() {
            return Err(ModelError::EmptyPool);
        }
        let mut seen = HashSet::new();
        for p in &self.passages {
            if !seen.insert(p.id) {
                return Err(ModelError::DuplicatePassage(p.id));
            }
            if p.text.trim().is_empty() {
                return Err(ModelError::EmptyPassageText(p.id));
            }
        }
        Ok(())
    }

    pub fn check_capacity(&self, max: usize) -> Result<(), ModelError> {
        if self.passages.len() > max {
            return Err(ModelError::PoolTooLarge {
                len: self.passages.len(),
                max,
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    /// Passage at a 1-based position.
    pub fn get(&self, position: usize) -> Option<&Passage> {
        position.checked_sub(1).and_then(|i| self.passages.get(i))
    }

    /// Passages of `indices` in the given order. Indices must be valid.
    pub fn select(&self, indices: &[usize]) -> Vec<&Passage> {
        indices.iter().filter_map(|&i| self.get(i)).collect()
    }

    /// A new pool holding the passages at `indices`, renumbered `1..=len`.
    pub fn sub_pool(&self, indices: &[usize]) -> Result<CandidatePool, ModelError> {
        check_indices(indices, self.len())?;
        CandidatePool::new(
            self.query_id.clone(),
            self.select(indices).into_iter().cloned().collect(),
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SubQueries {
    pub queries: Vec<String>,
}

impl SubQueries {
    pub fn new(queries: Vec<String>) -> Self {
        Self { queries }
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Raw,
    Refined,
}

/// An ordered subset of pool positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSet {
    pub indices: Vec<usize>,
    pub stage: Stage,
    /// Indices of the raw set a refined set was drawn from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<Vec<usize>>,
}

impl EvidenceSet {
    pub fn raw(indices: Vec<usize>) -> Self {
        Self {
            indices,
            stage: Stage::Raw,
            parent: None,
        }
    }

    pub fn refined(indices: Vec<usize>, parent: &EvidenceSet) -> Self {
        Self {
            indices,
            stage: Stage::Refined,
            parent: Some(parent.indices.clone()),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn validate(&self, pool_len: usize) -> Result<(), ModelError> {
        check_indices(&self.indices, pool_len)?;
        if let Some(parent) = &self.parent {
            check_indices(parent, pool_len)?;
            if !is_subset(&self.indices, parent) {
                return Err(ModelError::NotSubset);
            }
        }
        Ok(())
    }

    /// Same passages regardless of emission order.
    pub fn same_members(&self, other: &EvidenceSet) -> bool {
        let mut a = self.indices.clone();
        let mut b = other.indices.clone();
        a.sort_unstable();
        b.sort_unstable();
        a == b
    }
}

pub(crate) fn check_indices(indices: &[usize], pool_len: usize) -> Result<(), ModelError> {
    let mut seen = HashSet::with_capacity(indices.len());
    for &index in indices {
        if index == 0 || index > pool_len {
            return Err(ModelError::IndexOutOfPool { index, pool_len });
        }
        if !seen.insert(index) {
            return Err(ModelError::DuplicateIndex(index));
        }
    }
    Ok(())
}

pub(crate) fn is_subset(inner: &[usize], outer: &[usize]) -> bool {
    inner.iter().all(|i| outer.contains(i))
}

/// Provenance of one Expand-then-Refine run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub query_id: String,
    pub subqueries: SubQueries,
    pub raw_set: EvidenceSet,
    pub refined_set: EvidenceSet,
    /// Generated text per stage name (`expand`, `select`, `refine`).
    pub llm_texts: BTreeMap<String, String>,
    pub decoding: DecodingParams,
}

impl SelectionTrace {
    /// Checks `refined ⊆ raw ⊆ 1..=pool_len`.
    pub fn check_subset_chain(&self, pool_len: usize) -> Result<(), ModelError> {
        check_indices(&self.raw_set.indices, pool_len)?;
        check_indices(&self.refined_set.indices, pool_len)?;
        if !is_subset(&self.refined_set.indices, &self.raw_set.indices) {
            return Err(ModelError::NotSubset);
        }
        Ok(())
    }
}

/// Generator utility of one evidence set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilitySignal {
    pub ppl: f64,
    /// Entropy, `ln(ppl)`.
    pub h: f64,
    /// `h` with the set minus `h` without any evidence.
    pub delta_h: f64,
    pub p_score: f64,
}

impl UtilitySignal {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidSignal(msg.to_string()));
        if !(self.ppl.is_finite() && self.ppl > 0.0) {
            return bad("ppl must be positive and finite");
        }
        if (self.h - self.ppl.ln()).abs() > 1e-12 * self.h.abs().max(1.0) {
            return bad("h != ln(ppl)");
        }
        if !self.delta_h.is_finite() || !self.p_score.is_finite() {
            return bad("non-finite delta_h or p");
        }
        if self.p_score.abs() < 0.5 || self.p_score.abs() > 1.0 {
            return bad("|p| must lie in [0.5, 1]");
        }
        if (self.p_score > 0.0) != (self.delta_h <= 0.0) {
            return bad("sign of p disagrees with delta_h");
        }
        Ok(())
    }
}

/// Scaling coefficients of the ΔH → preference map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceMapParams {
    pub alpha: f64,
    pub beta: f64,
}

impl PreferenceMapParams {
    pub const MIN: f64 = 0.01;
    pub const MAX: f64 = 10.0;

    pub fn new(alpha: f64, beta: f64) -> Result<Self, ModelError> {
        for (name, value) in [("alpha", alpha), ("beta", beta)] {
            if !(Self::MIN..=Self::MAX).contains(&value) {
                return Err(ModelError::ParamOutOfBounds { name, value });
            }
        }
        Ok(Self { alpha, beta })
    }
}

impl Default for PreferenceMapParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    pub set: EvidenceSet,
    pub signal: UtilitySignal,
}

/// One question with its pool and `m` labeled candidate sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub query_id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    pub pool: CandidatePool,
    pub sets: Vec<LabeledSet>,
    pub best_index: usize,
}

impl TrainingInstance {
    pub fn p_scores(&self) -> Vec<f64> {
        self.sets.iter().map(|s| s.signal.p_score).collect()
    }

    /// Recomputes `best_index` from the current sets.
    pub fn refresh_best(&mut self) {
        self.best_index = best_by_score(&self.p_scores()).unwrap_or(0);
    }
}

/// Position of the largest score; ties go to the lowest position.
pub fn best_by_score(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some(b) if s <= scores[b] => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Checks every invariant of a training instance and returns it unchanged.
pub fn validate_instance(instance: TrainingInstance) -> Result<TrainingInstance, ModelError> {
    instance.pool.validate()?;
    let pool_len = instance.pool.len();
    for labeled in &instance.sets {
        labeled.set.validate(pool_len)?;
        labeled.signal.validate()?;
    }
    if instance.sets.len() < 2 {
        return Err(ModelError::EmptySetList(instance.sets.len()));
    }
    let expected = best_by_score(&instance.p_scores()).unwrap_or(0);
    if instance.best_index != expected {
        return Err(ModelError::BestIndexMismatch {
            found: instance.best_index,
            expected,
        });
    }
    Ok(instance)
}

/// Per-set log-likelihoods paired with their target preference scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetScoreVector {
    pub log_likelihoods: Vec<f64>,
    pub target_scores: Vec<f64>,
}

impl SetScoreVector {
    pub fn new(log_likelihoods: Vec<f64>, target_scores: Vec<f64>) -> Result<Self, ModelError> {
        if log_likelihoods.len() != target_scores.len() {
            return Err(ModelError::LengthMismatch(
                log_likelihoods.len(),
                target_scores.len(),
            ));
        }
        if log_likelihoods
            .iter()
            .chain(&target_scores)
            .any(|v| !v.is_finite())
        {
            return Err(ModelError::NonFinite);
        }
        Ok(Self {
            log_likelihoods,
            target_scores,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
}

impl QAExample {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.answers.is_empty() {
            return Err(ModelError::NoAnswers(self.id.clone()));
        }
        Ok(())
    }
}
