//! Generator utility of evidence sets and the signed preference map.
//!
//! The utility of a set is the change in answer entropy it causes:
//! `ΔH = ln PPL(answer | q, set) − ln PPL(answer | q)`. Negative ΔH means the
//! evidence helped. [`map_preference`] squashes ΔH into a signed score,
//! `[0.5, 1)` for helpful sets and `(−1, −0.5)` for harmful ones, with two
//! slopes fitted by [`fit_alpha_beta`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, LlmBackend};
use crate::model::{CandidatePool, EvidenceSet, ModelError, PreferenceMapParams, UtilitySignal};
use crate::prompts::{render_context, render_prompt, Bindings, PromptError, PromptTemplate};

#[derive(Debug, Error)]
pub enum UtilityError {
    #[error("gold answer is empty")]
    EmptyAnswer,
    #[error("perplexity must be positive and finite, got {0}")]
    NonPositivePpl(f64),
    #[error("no samples")]
    EmptySamples,
    #[error("no delta samples to fit")]
    NoSamples,
    #[error("interval [{lo}, {hi}] is empty")]
    InvalidInterval { lo: f64, hi: f64 },
    #[error("delta sample for {0} is not finite")]
    NonFinite(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One observed entropy change, tagged with its query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSample {
    pub delta_h: f64,
    #[serde(alias = "query_id")]
    pub source_query_id: String,
}

impl DeltaSample {
    pub fn new(delta_h: f64, source_query_id: impl Into<String>) -> Self {
        Self {
            delta_h,
            source_query_id: source_query_id.into(),
        }
    }
}

/// Logistic function, evaluated without overflow for any finite input.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`] on `(0, 1)`.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Perplexity of `gold_answer` after the answer prompt.
///
/// With `evidence`, the prompt's context block holds the set's passages in
/// emission order, numbered from 1; without it the block is omitted.
pub fn compute_ppl(
    backend: &dyn LlmBackend,
    question: &str,
    evidence: Option<(&EvidenceSet, &CandidatePool)>,
    gold_answer: &str,
    answer_prompt: &PromptTemplate,
) -> Result<f64, UtilityError> {
    if gold_answer.trim().is_empty() {
        return Err(UtilityError::EmptyAnswer);
    }
    let mut bindings = Bindings::new().with("question", question);
    if let Some((set, pool)) = evidence {
        set.validate(pool.len())?;
        bindings.set("context", render_context(pool.select(&set.indices)));
    }
    let prompt = render_prompt(answer_prompt, &bindings)?;
    let scored = backend.score_continuation(&prompt, gold_answer)?;
    let mean = scored.mean().ok_or(BackendError::EmptyContinuation)?;
    Ok((-mean).exp())
}

pub fn entropy(ppl: f64) -> Result<f64, UtilityError> {
    if !(ppl.is_finite() && ppl > 0.0) {
        return Err(UtilityError::NonPositivePpl(ppl));
    }
    Ok(ppl.ln())
}

/// Signed preference score of an entropy change.
pub fn map_preference(delta_h: f64, params: &PreferenceMapParams) -> f64 {
    if delta_h <= 0.0 {
        // 1 − σ(x) = σ(−x) keeps precision near 1
        sigmoid(-params.alpha * delta_h)
    } else {
        -sigmoid(params.beta * delta_h)
    }
}

/// Entropy change for a set given its PPL and the no-evidence entropy, with
/// the resulting preference score.
pub fn signal_from_ppl(
    ppl: f64,
    baseline_h: f64,
    params: &PreferenceMapParams,
) -> Result<UtilitySignal, UtilityError> {
    let h = entropy(ppl)?;
    let delta_h = h - baseline_h;
    Ok(UtilitySignal {
        ppl,
        h,
        delta_h,
        p_score: map_preference(delta_h, params),
    })
}

/// Entropy of the answer with no evidence.
pub fn baseline_entropy(
    backend: &dyn LlmBackend,
    question: &str,
    gold_answer: &str,
    answer_prompt: &PromptTemplate,
) -> Result<f64, UtilityError> {
    entropy(compute_ppl(
        backend,
        question,
        None,
        gold_answer,
        answer_prompt,
    )?)
}

/// Scores one set against a precomputed baseline entropy.
#[allow(clippy::too_many_arguments)]
pub fn label_set(
    backend: &dyn LlmBackend,
    question: &str,
    set: &EvidenceSet,
    pool: &CandidatePool,
    gold_answer: &str,
    answer_prompt: &PromptTemplate,
    baseline_h: f64,
    params: &PreferenceMapParams,
) -> Result<UtilitySignal, UtilityError> {
    let ppl = compute_ppl(
        backend,
        question,
        Some((set, pool)),
        gold_answer,
        answer_prompt,
    )?;
    signal_from_ppl(ppl, baseline_h, params)
}

/// Kolmogorov–Smirnov distance between the samples and `Unif[lo, hi]`.
pub fn ks_distance(samples: &[f64], lo: f64, hi: f64) -> Result<f64, UtilityError> {
    if samples.is_empty() {
        return Err(UtilityError::EmptySamples);
    }
    if lo.is_nan() || hi.is_nan() || lo >= hi {
        return Err(UtilityError::InvalidInterval { lo, hi });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(ks_sorted(&sorted, lo, hi))
}

fn ks_sorted(sorted: &[f64], lo: f64, hi: f64) -> f64 {
    let n = sorted.len() as f64;
    let width = hi - lo;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = ((x - lo) / width).clamp(0.0, 1.0);
        // ECDF jumps from i/n to (i+1)/n at x
        let below = i as f64 / n;
        let above = (i + 1) as f64 / n;
        d = d.max(above - f).max(f - below);
    }
    d.min(1.0)
}

/// Fitted map coefficients and the KS objective they reach.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaBetaFit {
    pub alpha: f64,
    pub beta: f64,
    pub objective: f64,
    pub positive_ks: Option<f64>,
    pub negative_ks: Option<f64>,
}

impl AlphaBetaFit {
    pub fn params(&self) -> PreferenceMapParams {
        PreferenceMapParams {
            alpha: self.alpha,
            beta: self.beta,
        }
    }
}

const GRID_POINTS: usize = 50;
const REFINE_ROUNDS: usize = 3;
const REFINE_POINTS: usize = 21;

/// KS objective of the fit at `(alpha, beta)`.
///
/// Helpful deltas (`ΔH ≤ 0`) are compared with `Unif[0.5, 1]` and harmful
/// ones with `Unif[−1, −0.5]`; an empty class contributes nothing.
pub fn fit_objective(deltas: &[DeltaSample], params: &PreferenceMapParams) -> f64 {
    let (pos, neg) = split(deltas);
    branch_ks(&pos, params.alpha, true).unwrap_or(0.0)
        + branch_ks(&neg, params.beta, false).unwrap_or(0.0)
}

fn split(deltas: &[DeltaSample]) -> (Vec<f64>, Vec<f64>) {
    deltas.iter().map(|d| d.delta_h).partition(|&d| d <= 0.0)
}

fn branch_ks(deltas: &[f64], slope: f64, positive: bool) -> Option<f64> {
    if deltas.is_empty() {
        return None;
    }
    let mut mapped: Vec<f64> = deltas
        .iter()
        .map(|&d| {
            if positive {
                sigmoid(-slope * d)
            } else {
                -sigmoid(slope * d)
            }
        })
        .collect();
    mapped.sort_by(f64::total_cmp);
    Some(if positive {
        ks_sorted(&mapped, 0.5, 1.0)
    } else {
        ks_sorted(&mapped, -1.0, -0.5)
    })
}

/// Minimizes one branch's KS distance over `[MIN, MAX]` in log space.
fn fit_branch(deltas: &[f64], positive: bool) -> (f64, f64) {
    let lo = PreferenceMapParams::MIN.ln();
    let hi = PreferenceMapParams::MAX.ln();
    let eval = |log_s: f64| {
        let s = log_s.clamp(lo, hi).exp();
        (s, branch_ks(deltas, s, positive).unwrap_or(0.0))
    };
    let mut best = eval(0.0);
    let consider = |best: &mut (f64, f64), cand: (f64, f64)| {
        if cand.1 < best.1 || (cand.1 == best.1 && cand.0 < best.0) {
            *best = cand;
        }
    };
    let step = (hi - lo) / (GRID_POINTS - 1) as f64;
    for i in 0..GRID_POINTS {
        consider(&mut best, eval(lo + step * i as f64));
    }
    let mut radius = step;
    for _ in 0..REFINE_ROUNDS {
        let centre = best.0.ln();
        let inner = 2.0 * radius / (REFINE_POINTS - 1) as f64;
        for i in 0..REFINE_POINTS {
            consider(&mut best, eval(centre - radius + inner * i as f64));
        }
        radius = inner;
    }
    best
}

/// Fits `(α, β)` by minimizing the summed KS distances.
///
/// A log-spaced 50×50 grid over `[0.01, 10]²` (plus the default `(1, 1)`) is
/// followed by three rounds of shrinking local search around the best point.
/// The objective separates into an α term and a β term, so each coordinate
/// is searched independently; the result is the same as the joint grid.
/// When one class is empty its coefficient stays at 1.
pub fn fit_alpha_beta(deltas: &[DeltaSample]) -> Result<AlphaBetaFit, UtilityError> {
    if deltas.is_empty() {
        return Err(UtilityError::NoSamples);
    }
    if let Some(bad) = deltas.iter().find(|d| !d.delta_h.is_finite()) {
        return Err(UtilityError::NonFinite(bad.source_query_id.clone()));
    }
    let (pos, neg) = split(deltas);
    let (alpha, positive_ks) = if pos.is_empty() {
        (1.0, None)
    } else {
        let (a, ks) = fit_branch(&pos, true);
        (a, Some(ks))
    };
    let (beta, negative_ks) = if neg.is_empty() {
        (1.0, None)
    } else {
        let (b, ks) = fit_branch(&neg, false);
        (b, Some(ks))
    };
    Ok(AlphaBetaFit {
        alpha,
        beta,
        objective: positive_ks.unwrap_or(0.0) + negative_ks.unwrap_or(0.0),
        positive_ks,
        negative_ks,
    })
}

/// ΔH that [`map_preference`] sends to `score`, for `score` in
/// `(0.5, 1)` or `(−1, −0.5)`.
pub fn inverse_preference(score: f64, params: &PreferenceMapParams) -> f64 {
    if score > 0.0 {
        logit(1.0 - score) / params.alpha
    } else {
        logit(-score) / params.beta
    }
}
