//! Set-list-wise training objective on a small differentiable scorer.
//!
//! The loss over `m` labeled sets for one question is
//!
//! ```text
//! L = −ℓ* + λ · KL(softmax(P) ‖ softmax(ℓ))
//! ```
//!
//! where `ℓ_i` is the sequence log-likelihood the scorer assigns to set `i`,
//! `ℓ*` is that of the best-scoring set, and `P` are the preference scores.
//! [`ToyScorer`] stands in for the selector LLM: it emits pool positions one
//! at a time, then a stop symbol, so `ℓ` is a true sequence log-likelihood
//! and every gradient here is exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    best_by_score, CandidatePool, EvidenceSet, LabeledSet, ModelError, Passage, TrainingInstance,
    UtilitySignal,
};

/// Tolerance on `Σ = 1` for probability vectors.
pub const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("need at least 2 scores, got {0}")]
    LengthTooSmall(usize),
    #[error("vectors differ in length ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("model distribution has zero mass at position {0}")]
    ZeroModelMass(usize),
    #[error("{which} distribution sums to {sum}, not 1")]
    NotNormalized { which: &'static str, sum: f64 },
    #[error("input contains a non-finite value")]
    NonFinite,
    #[error("best index {index} out of range for {len} sets")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid set: {0}")]
    InvalidSet(#[from] ModelError),
    #[error("scorer has {scorer} passage rows but the pool has {pool}")]
    ScorerShape { scorer: usize, pool: usize },
    #[error("lambda must be finite and non-negative, got {0}")]
    InvalidLambda(f64),
    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),
    #[error("no training instances")]
    NoInstances,
    #[error("loss became non-finite at step {0}")]
    DivergenceDetected(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(LossError::InvalidLambda(self.lambda));
        }
        Ok(())
    }
}

/// Autoregressive index-or-stop scorer over a fixed-size pool.
///
/// At step `t` the context is `c_t = q + Σ e_k` over positions already
/// emitted; remaining position `j` gets logit `c_t · e_j` and stop gets
/// `stop_logit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyScorer {
    pub embedding_dim: usize,
    pub passage_embeddings: Vec<Vec<f64>>,
    pub query_embedding: Vec<f64>,
    pub stop_logit: f64,
}

impl ToyScorer {
    pub const DEFAULT_DIM: usize = 8;

    pub fn zeros(pool_len: usize, dim: usize) -> Self {
        Self {
            embedding_dim: dim,
            passage_embeddings: vec![vec![0.0; dim]; pool_len],
            query_embedding: vec![0.0; dim],
            stop_logit: 0.0,
        }
    }

    /// Parameters drawn uniformly from `[−scale, scale]`.
    pub fn random(pool_len: usize, dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || rng.random_range(-scale..=scale);
        let passage_embeddings = (0..pool_len)
            .map(|_| (0..dim).map(|_| draw()).collect())
            .collect();
        let query_embedding = (0..dim).map(|_| draw()).collect();
        let stop_logit = draw();
        Self {
            embedding_dim: dim,
            passage_embeddings,
            query_embedding,
            stop_logit,
        }
    }

    pub fn pool_len(&self) -> usize {
        self.passage_embeddings.len()
    }

    pub fn num_params(&self) -> usize {
        (self.pool_len() + 1) * self.embedding_dim + 1
    }

    /// Passage rows, then the query, then the stop logit.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for row in &self.passage_embeddings {
            out.extend_from_slice(row);
        }
        out.extend_from_slice(&self.query_embedding);
        out.push(self.stop_logit);
        out
    }

    /// Inverse of [`ToyScorer::to_flat`] for a scorer of the same shape.
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let d = self.embedding_dim;
        for (i, row) in self.passage_embeddings.iter_mut().enumerate() {
            row.copy_from_slice(&flat[i * d..(i + 1) * d]);
        }
        let q = self.pool_len() * d;
        self.query_embedding.copy_from_slice(&flat[q..q + d]);
        self.stop_logit = flat[q + d];
    }

    fn check_pool(&self, pool_len: usize) -> Result<(), LossError> {
        if self.pool_len() != pool_len {
            return Err(LossError::ScorerShape {
                scorer: self.pool_len(),
                pool: pool_len,
            });
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Log-likelihood of emitting `indices` then stopping, with its gradient
/// in [`ToyScorer::to_flat`] layout.
pub fn sequence_loglik_grad(
    scorer: &ToyScorer,
    indices: &[usize],
) -> Result<(f64, Vec<f64>), LossError> {
    let n = scorer.pool_len();
    let d = scorer.embedding_dim;
    crate::model::check_indices(indices, n)?;
    let mut grad = vec![0.0; scorer.num_params()];
    let q_off = n * d;
    let stop_off = q_off + d;

    let mut context = scorer.query_embedding.clone();
    let mut chosen: Vec<usize> = Vec::with_capacity(indices.len());
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut ll = 0.0;
    let mut logits = Vec::with_capacity(n + 1);
    for t in 0..=indices.len() {
        logits.clear();
        logits.extend(
            remaining
                .iter()
                .map(|&j| dot(&context, &scorer.passage_embeddings[j])),
        );
        logits.push(scorer.stop_logit);
        let lse = log_sum_exp(&logits);
        // slot in `logits` of the emitted symbol; the last slot is stop
        let target = match indices.get(t) {
            Some(&i) => remaining
                .iter()
                .position(|&j| j == i - 1)
                .expect("valid index"),
            None => remaining.len(),
        };
        ll += logits[target] - lse;

        // dℓ/dlogit = onehot − softmax
        let mut v = vec![0.0; d];
        for (slot, &j) in remaining.iter().enumerate() {
            let g = f64::from(u8::from(slot == target)) - (logits[slot] - lse).exp();
            axpy(&mut grad[j * d..(j + 1) * d], g, &context);
            axpy(&mut v, g, &scorer.passage_embeddings[j]);
        }
        let g_stop =
            f64::from(u8::from(target == remaining.len())) - (scorer.stop_logit - lse).exp();
        grad[stop_off] += g_stop;
        // the context is q plus every earlier pick
        axpy(&mut grad[q_off..stop_off], 1.0, &v);
        for &k in &chosen {
            axpy(&mut grad[k * d..(k + 1) * d], 1.0, &v);
        }

        if t < indices.len() {
            let j = remaining.remove(target);
            axpy(&mut context, 1.0, &scorer.passage_embeddings[j]);
            chosen.push(j);
        }
    }
    Ok((ll, grad))
}

/// Sequence log-likelihood of `set` over `pool`.
pub fn sequence_loglik(
    scorer: &ToyScorer,
    set: &EvidenceSet,
    pool: &CandidatePool,
) -> Result<f64, LossError> {
    scorer.check_pool(pool.len())?;
    Ok(sequence_loglik_grad(scorer, &set.indices)?.0)
}

/// Every ordered sequence of distinct positions from `1..=pool_len`,
/// including the empty one.
pub fn enumerate_sequences(pool_len: usize) -> Vec<Vec<usize>> {
    fn extend(prefix: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        out.push(prefix.clone());
        for i in 1..=n {
            if !prefix.contains(&i) {
                prefix.push(i);
                extend(prefix, n, out);
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    extend(&mut Vec::new(), pool_len, &mut out);
    out
}

fn softmax(xs: &[f64]) -> Result<Vec<f64>, LossError> {
    if xs.len() < 2 {
        return Err(LossError::LengthTooSmall(xs.len()));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(LossError::NonFinite);
    }
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Softmax of the preference scores.
pub fn target_distribution(p_scores: &[f64]) -> Result<Vec<f64>, LossError> {
    softmax(p_scores)
}

/// Softmax of the sequence log-likelihoods.
pub fn model_distribution(logliks: &[f64]) -> Result<Vec<f64>, LossError> {
    softmax(logliks)
}

fn check_normalized(which: &'static str, v: &[f64]) -> Result<(), LossError> {
    let sum: f64 = v.iter().sum();
    if !sum.is_finite() || (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(LossError::NotNormalized { which, sum });
    }
    Ok(())
}

/// `Σ P_i ln(P_i / Q_i)`, with `0 · ln 0 = 0`.
pub fn kl_loss(p: &[f64], q: &[f64]) -> Result<f64, LossError> {
    if p.len() != q.len() {
        return Err(LossError::DimensionMismatch(p.len(), q.len()));
    }
    check_normalized("target", p)?;
    check_normalized("model", q)?;
    if let Some(i) = q.iter().position(|&x| x <= 0.0) {
        return Err(LossError::ZeroModelMass(i));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum::<f64>()
        .max(0.0))
}

/// Negative sequence log-likelihood of the best set.
pub fn ce_loss(logliks: &[f64], best_index: usize) -> Result<f64, LossError> {
    logliks
        .get(best_index)
        .map(|l| -l)
        .ok_or(LossError::IndexOutOfRange {
            index: best_index,
            len: logliks.len(),
        })
}

/// Loss terms for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub kl: f64,
    pub target: Vec<f64>,
    pub model: Vec<f64>,
}

/// Loss from precomputed log-likelihoods, with `∂L/∂ℓ_i`.
pub fn combined_loss(
    logliks: &[f64],
    p_scores: &[f64],
    best_index: usize,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<f64>), LossError> {
    cfg.validate()?;
    if logliks.len() != p_scores.len() {
        return Err(LossError::DimensionMismatch(logliks.len(), p_scores.len()));
    }
    let target = target_distribution(p_scores)?;
    let model = model_distribution(logliks)?;
    let ce = ce_loss(logliks, best_index)?;
    let kl = kl_loss(&target, &model)?;
    let d_ll = target
        .iter()
        .zip(&model)
        .enumerate()
        .map(|(i, (p, q))| cfg.lambda * (q - p) - f64::from(u8::from(i == best_index)))
        .collect();
    Ok((
        LossBreakdown {
            total: ce + cfg.lambda * kl,
            ce,
            kl,
            target,
            model,
        },
        d_ll,
    ))
}

/// Loss of one instance under the scorer and its gradient over the
/// scorer's flat parameters.
pub fn total_loss(
    instance: &TrainingInstance,
    scorer: &ToyScorer,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<f64>), LossError> {
    scorer.check_pool(instance.pool.len())?;
    let mut logliks = Vec::with_capacity(instance.sets.len());
    let mut grads = Vec::with_capacity(instance.sets.len());
    for labeled in &instance.sets {
        let (ll, g) = sequence_loglik_grad(scorer, &labeled.set.indices)?;
        logliks.push(ll);
        grads.push(g);
    }
    let (breakdown, d_ll) =
        combined_loss(&logliks, &instance.p_scores(), instance.best_index, cfg)?;
    let mut grad = vec![0.0; scorer.num_params()];
    for (coef, g) in d_ll.iter().zip(&grads) {
        // dL/dθ = Σ_i (∂L/∂ℓ_i)(∂ℓ_i/∂θ); the sign is already in d_ll
        axpy(&mut grad, *coef, g);
    }
    Ok((breakdown, grad))
}

fn mean_loss(
    instances: &[TrainingInstance],
    scorer: &ToyScorer,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>), LossError> {
    let mut total = 0.0;
    let mut grad = vec![0.0; scorer.num_params()];
    for inst in instances {
        let (b, g) = total_loss(inst, scorer, cfg)?;
        total += b.total;
        axpy(&mut grad, 1.0, &g);
    }
    let m = instances.len() as f64;
    grad.iter_mut().for_each(|g| *g /= m);
    Ok((total / m, grad))
}

/// Plain gradient descent on the mean loss.
///
/// Returns the trained scorer and the mean loss before every step plus the
/// final one (`steps + 1` values).
pub fn train_toy(
    instances: &[TrainingInstance],
    mut scorer: ToyScorer,
    cfg: &LossConfig,
    steps: usize,
    learning_rate: f64,
) -> Result<(ToyScorer, Vec<f64>), LossError> {
    if instances.is_empty() {
        return Err(LossError::NoInstances);
    }
    if !(learning_rate.is_finite() && learning_rate > 0.0) {
        return Err(LossError::InvalidLearningRate(learning_rate));
    }
    let mut curve = Vec::with_capacity(steps + 1);
    let mut params = scorer.to_flat();
    for step in 0..=steps {
        let (loss, grad) = mean_loss(instances, &scorer, cfg).map_err(|e| match e {
            LossError::ZeroModelMass(_)
            | LossError::NonFinite
            | LossError::NotNormalized { .. } => LossError::DivergenceDetected(step),
            other => other,
        })?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(LossError::DivergenceDetected(step));
        }
        curve.push(loss);
        if step == steps {
            break;
        }
        axpy(&mut params, -learning_rate, &grad);
        if params.iter().any(|p| !p.is_finite()) {
            return Err(LossError::DivergenceDetected(step + 1));
        }
        scorer.set_flat(&params);
    }
    Ok((scorer, curve))
}

/// Largest relative gap between the analytic gradient and central finite
/// differences of step `h`. The denominator is floored at `1e-6`.
pub fn gradient_check(
    instance: &TrainingInstance,
    scorer: &ToyScorer,
    cfg: &LossConfig,
    h: f64,
) -> Result<f64, LossError> {
    let (_, analytic) = total_loss(instance, scorer, cfg)?;
    let base = scorer.to_flat();
    let mut probe = scorer.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut shifted = base.clone();
        shifted[i] = base[i] + h;
        probe.set_flat(&shifted);
        let up = total_loss(instance, &probe, cfg)?.0.total;
        shifted[i] = base[i] - h;
        probe.set_flat(&shifted);
        let down = total_loss(instance, &probe, cfg)?.0.total;
        let numeric = (up - down) / (2.0 * h);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// A random instance for loss checks: `m` distinct non-empty sets over a
/// pool of `pool_len` placeholder passages, with random preference scores.
pub fn random_instance(pool_len: usize, m: usize, seed: u64) -> TrainingInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = CandidatePool {
        query_id: format!("toy-{seed}"),
        passages: (1..=pool_len)
            .map(|i| Passage::new(i as u64, format!("P{i}"), format!("passage {i}")))
            .collect(),
    };
    let mut sets: Vec<LabeledSet> = Vec::with_capacity(m);
    while sets.len() < m {
        let len = rng.random_range(1..=pool_len);
        let mut indices: Vec<usize> = (1..=pool_len).collect();
        for i in (1..indices.len()).rev() {
            indices.swap(i, rng.random_range(0..=i));
        }
        indices.truncate(len);
        if sets.iter().any(|s| s.set.indices == indices) {
            continue;
        }
        let p_score = if rng.random_bool(0.5) {
            rng.random_range(0.5..1.0)
        } else {
            rng.random_range(-1.0..-0.5)
        };
        let delta_h = if p_score > 0.0 { -0.1 } else { 0.1 };
        sets.push(LabeledSet {
            set: EvidenceSet::raw(indices),
            signal: UtilitySignal {
                ppl: (1.0f64 + delta_h).exp(),
                h: 1.0 + delta_h,
                delta_h,
                p_score,
            },
        });
    }
    let mut inst = TrainingInstance {
        query_id: pool.query_id.clone(),
        question: "toy".into(),
        gold_answers: vec!["toy".into()],
        pool,
        sets,
        best_index: 0,
    };
    inst.best_index = best_by_score(&inst.p_scores()).unwrap_or(0);
    inst
}

/// One injected-log-likelihood case of the parity fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParityCase {
    pub name: String,
    pub logliks: Vec<f64>,
    pub p_scores: Vec<f64>,
    pub best_index: usize,
    pub lambda: f64,
    pub expected_ce: f64,
    pub expected_kl: f64,
    pub expected_total: f64,
}

/// A scorer-driven case: log-likelihoods come from `scorer` over `sets`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyParityCase {
    pub name: String,
    pub scorer: ToyScorer,
    pub sets: Vec<Vec<usize>>,
    pub p_scores: Vec<f64>,
    pub best_index: usize,
    pub lambda: f64,
    pub expected_logliks: Vec<f64>,
    pub expected_total: f64,
}

/// Shared expected values for another implementation of the combined loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParityFixture {
    pub tolerance: f64,
    pub cases: Vec<ParityCase>,
    pub toy_cases: Vec<ToyParityCase>,
}

fn parity_case(
    name: &str,
    logliks: Vec<f64>,
    p_scores: Vec<f64>,
    best_index: usize,
    lambda: f64,
) -> Result<ParityCase, LossError> {
    let (b, _) = combined_loss(&logliks, &p_scores, best_index, &LossConfig { lambda })?;
    Ok(ParityCase {
        name: name.into(),
        logliks,
        p_scores,
        best_index,
        lambda,
        expected_ce: b.ce,
        expected_kl: b.kl,
        expected_total: b.total,
    })
}

pub fn parity_fixture(seed: u64) -> Result<ParityFixture, LossError> {
    let mut cases = vec![
        parity_case("equal_two", vec![-1.0, -1.0], vec![0.7, 0.7], 0, 0.1)?,
        parity_case("lambda_zero", vec![-2.0, -0.5], vec![0.9, -0.6], 0, 0.0)?,
        parity_case(
            "lambda_one",
            vec![-3.0, -1.0, -2.0],
            vec![0.6, 0.95, -0.8],
            1,
            1.0,
        )?,
        parity_case(
            "five_sets",
            vec![-4.2, -1.3, -2.7, -0.9, -6.0],
            vec![0.55, 0.81, -0.52, 0.97, -0.99],
            3,
            0.1,
        )?,
        parity_case(
            "best_unlikely",
            vec![-12.0, -0.01],
            vec![0.99, -0.99],
            0,
            0.5,
        )?,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..5 {
        let m = rng.random_range(2..=6);
        let logliks: Vec<f64> = (0..m).map(|_| rng.random_range(-15.0..0.0)).collect();
        let p: Vec<f64> = (0..m)
            .map(|_| {
                if rng.random_bool(0.5) {
                    rng.random_range(0.5..1.0)
                } else {
                    rng.random_range(-1.0..-0.5)
                }
            })
            .collect();
        let best = best_by_score(&p).unwrap_or(0);
        cases.push(parity_case(&format!("random_{k}"), logliks, p, best, 0.1)?);
    }

    let mut toy_cases = Vec::new();
    for k in 0..3u64 {
        let inst = random_instance(4, 3, seed.wrapping_add(k));
        let scorer = ToyScorer::random(4, ToyScorer::DEFAULT_DIM, 0.5, seed.wrapping_add(100 + k));
        let cfg = LossConfig::default();
        let logliks = inst
            .sets
            .iter()
            .map(|s| sequence_loglik_grad(&scorer, &s.set.indices).map(|r| r.0))
            .collect::<Result<Vec<_>, _>>()?;
        let (b, _) = total_loss(&inst, &scorer, &cfg)?;
        toy_cases.push(ToyParityCase {
            name: format!("toy_{k}"),
            scorer,
            sets: inst.sets.iter().map(|s| s.set.indices.clone()).collect(),
            p_scores: inst.p_scores(),
            best_index: inst.best_index,
            lambda: cfg.lambda,
            expected_logliks: logliks,
            expected_total: b.total,
        });
    }
    Ok(ParityFixture {
        tolerance: 1e-6,
        cases,
        toy_cases,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCheckReport {
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

/// Invariant and gradient checks of this module, for a given seed.
pub fn run_loss_checks(seed: u64) -> LossCheckReport {
    let mut checks = Vec::new();
    let mut record = |name: &str, result: Result<(bool, String), LossError>| {
        let (passed, detail) = result.unwrap_or_else(|e| (false, e.to_string()));
        checks.push(CheckResult {
            name: name.into(),
            passed,
            detail,
        });
    };

    record(
        "kl_gibbs",
        (|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut min_kl = f64::INFINITY;
            for _ in 0..20 {
                let m = rng.random_range(2..=6);
                let a: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
                let b: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
                let p = softmax(&a)?;
                let q = softmax(&b)?;
                let kl = kl_loss(&p, &q)?;
                if kl < 0.0 || kl_loss(&p, &p)?.abs() > 1e-9 {
                    return Ok((false, format!("kl {kl}")));
                }
                min_kl = min_kl.min(kl);
            }
            Ok((
                min_kl > 0.0,
                format!("min KL over distinct pairs {min_kl:.3e}"),
            ))
        })(),
    );

    record(
        "kl_point_mass",
        (|| {
            let kl = kl_loss(&[1.0, 0.0], &[0.5, 0.5])?;
            Ok(((kl - std::f64::consts::LN_2).abs() < 1e-9, format!("{kl}")))
        })(),
    );

    record(
        "sequence_normalization",
        (|| {
            let mut worst: f64 = 0.0;
            for n in 1..=3 {
                let scorer =
                    ToyScorer::random(n, ToyScorer::DEFAULT_DIM, 1.0, seed.wrapping_add(n as u64));
                let mut total = 0.0;
                for seq in enumerate_sequences(n) {
                    total += sequence_loglik_grad(&scorer, &seq)?.0.exp();
                }
                worst = worst.max((total - 1.0).abs());
            }
            Ok((worst < 1e-9, format!("max |Σ exp(ℓ) − 1| = {worst:.3e}")))
        })(),
    );

    record(
        "gradient_check",
        (|| {
            let mut worst: f64 = 0.0;
            for k in 0..20u64 {
                let s = seed.wrapping_add(k);
                let inst = random_instance(4, 3, s);
                let scorer = ToyScorer::random(4, ToyScorer::DEFAULT_DIM, 0.5, s ^ 0x5eed);
                worst = worst.max(gradient_check(
                    &inst,
                    &scorer,
                    &LossConfig::default(),
                    1e-5,
                )?);
            }
            Ok((worst < 1e-4, format!("max relative error {worst:.3e}")))
        })(),
    );

    record(
        "toy_descent",
        (|| {
            let inst = random_instance(4, 3, seed);
            let scorer = ToyScorer::random(4, ToyScorer::DEFAULT_DIM, 0.5, seed ^ 0xd00d);
            let cfg = LossConfig::default();
            let (trained, curve) = train_toy(std::slice::from_ref(&inst), scorer, &cfg, 500, 0.1)?;
            let (b, _) = total_loss(&inst, &trained, &cfg)?;
            let aligned = best_by_score(&b.model) == best_by_score(&b.target);
            let first = curve[0];
            let last = curve[curve.len() - 1];
            Ok((
                last < first && aligned,
                format!("loss {first:.6} -> {last:.6}, argmax aligned: {aligned}"),
            ))
        })(),
    );

    let passed = checks.iter().all(|c| c.passed);
    LossCheckReport {
        seed,
        passed,
        checks,
    }
}
