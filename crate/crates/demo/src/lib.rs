//! WebAssembly bindings for the static page in `www/`.
//!
//! Three operations are exported: sampling the ΔH → preference curve,
//! recovering `(α, β)` from synthetic entropy changes, and breaking the
//! novelty of an ordered passage list into per-passage marginal gains.

use optiset_core::metrics::{jaccard, novelty, SimilarityKind};
use optiset_core::model::{Passage, PreferenceMapParams};
use optiset_core::utility::{fit_alpha_beta, inverse_preference, map_preference, DeltaSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn params(alpha: f64, beta: f64) -> Result<PreferenceMapParams, JsError> {
    PreferenceMapParams::new(alpha, beta).map_err(|e| JsError::new(&e.to_string()))
}

/// `n` evenly spaced points on `[lo, hi]`, flattened as `x0, y0, x1, y1, …`.
#[wasm_bindgen]
pub fn preference_curve(
    alpha: f64,
    beta: f64,
    lo: f64,
    hi: f64,
    n: usize,
) -> Result<Vec<f64>, JsError> {
    let p = params(alpha, beta)?;
    if lo.is_nan() || hi.is_nan() || lo >= hi || n < 2 {
        return Err(JsError::new("need lo < hi and at least two points"));
    }
    Ok((0..n)
        .flat_map(|i| {
            let x = lo + (hi - lo) * i as f64 / (n - 1) as f64;
            [x, map_preference(x, &p)]
        })
        .collect())
}

#[wasm_bindgen]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticFit {
    pub alpha: f64,
    pub beta: f64,
    pub objective: f64,
    /// Objective at the default `(1, 1)`.
    pub objective_default: f64,
}

/// Draws `n` scores per branch uniformly from `(0.5, 1)` and `(−1, −0.5)`,
/// maps them back to ΔH under `(alpha, beta)` and fits the coefficients.
#[wasm_bindgen]
pub fn fit_synthetic(alpha: f64, beta: f64, n: usize, seed: u64) -> Result<SyntheticFit, JsError> {
    let truth = params(alpha, beta)?;
    if n == 0 {
        return Err(JsError::new("need at least one sample per branch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut deltas = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let pos: f64 = rng.random_range(0.5..1.0);
        let neg: f64 = rng.random_range(-1.0..-0.5);
        for score in [pos, neg] {
            if score.abs() > 0.5 {
                deltas.push(DeltaSample::new(
                    inverse_preference(score, &truth),
                    "synthetic",
                ));
            }
        }
    }
    let fit = fit_alpha_beta(&deltas).map_err(|e| JsError::new(&e.to_string()))?;
    Ok(SyntheticFit {
        alpha: fit.alpha,
        beta: fit.beta,
        objective: fit.objective,
        objective_default: optiset_core::utility::fit_objective(
            &deltas,
            &PreferenceMapParams::default(),
        ),
    })
}

#[derive(Debug, Serialize, PartialEq)]
pub struct NoveltyBreakdown {
    /// Marginal gain of each passage: 1 for the first, then one minus the
    /// highest similarity to any earlier passage.
    pub gains: Vec<f64>,
    pub novelty: f64,
}

pub fn breakdown(texts: &[&str]) -> Option<NoveltyBreakdown> {
    let passages: Vec<Passage> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| Passage::new(i as u64, "", *t))
        .collect();
    let refs: Vec<&Passage> = passages.iter().collect();
    let total = novelty(&refs, SimilarityKind::Jaccard, None).ok()?;
    let gains = (0..texts.len())
        .map(|i| {
            1.0 - (0..i)
                .map(|j| jaccard(texts[i], texts[j]))
                .fold(0.0, f64::max)
        })
        .collect();
    Some(NoveltyBreakdown {
        gains,
        novelty: total,
    })
}

/// Passages are separated by blank lines. Returns JSON
/// `{"gains": [...], "novelty": x}`.
#[wasm_bindgen]
pub fn novelty_breakdown(text: &str) -> Result<String, JsError> {
    let texts: Vec<&str> = text
        .split("\n\n")
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .collect();
    let b = breakdown(&texts).ok_or_else(|| JsError::new("enter at least one passage"))?;
    serde_json::to_string(&b).map_err(|e| JsError::new(&e.to_string()))
}
