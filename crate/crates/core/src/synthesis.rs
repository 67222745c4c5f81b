//! Training-data construction.
//!
//! For each question: score the gold answer without evidence, run the
//! answer-aware selection pipeline `k_samples` times with sampling, label
//! every distinct refined set by its entropy change, then drop
//! non-discriminative instances, keep a spread of at most `retain_sets`
//! sets, and emit passage-order shuffled copies.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, DecodingParams, LlmBackend};
use crate::digest::stable_u64;
use crate::model::{
    CandidatePool, EvidenceSet, LabeledSet, ModelError, PreferenceMapParams, QAExample,
    TrainingInstance,
};
use crate::prompts::{PromptSet, TemplateName};
use crate::records::{read_jsonl, write_jsonl, RecordError, TrainingRecord};
use crate::selection::{EsrConfig, Selector};
use crate::utility::{
    baseline_entropy, fit_alpha_beta, label_set, map_preference, AlphaBetaFit, DeltaSample,
    UtilityError,
};

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("every selection run failed for {query_id}: {last}")]
    AllRunsFailed { query_id: String, last: String },
    #[error("the backend cannot score continuations")]
    ScoringUnsupported,
    #[error("invalid synthesis config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Utility(#[from] UtilityError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Record(#[from] RecordError),
}

fn is_scoring_unsupported(e: &UtilityError) -> bool {
    matches!(e, UtilityError::Backend(BackendError::ScoringUnsupported))
}

fn default_k() -> usize {
    10
}
fn default_retain() -> usize {
    5
}
fn default_shuffle() -> usize {
    3
}
fn default_epsilon() -> f64 {
    0.05
}
fn default_true() -> bool {
    true
}
fn default_workers() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    #[serde(default = "default_k")]
    pub k_samples: usize,
    #[serde(default = "default_retain")]
    pub retain_sets: usize,
    #[serde(default = "default_shuffle")]
    pub shuffle_copies: usize,
    #[serde(default = "default_epsilon")]
    pub spread_epsilon: f64,
    #[serde(default)]
    pub params: PreferenceMapParams,
    /// Refit `params` on all entropy changes of the run before filtering.
    #[serde(default = "default_true")]
    pub fit_params: bool,
    /// Selection retries per stage.
    #[serde(default = "crate::synthesis::default_max_retries")]
    pub max_retries: u32,
    /// Questions processed concurrently.
    #[serde(default = "default_workers")]
    pub workers: usize,
}

pub(crate) fn default_max_retries() -> u32 {
    2
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            k_samples: default_k(),
            retain_sets: default_retain(),
            shuffle_copies: default_shuffle(),
            spread_epsilon: default_epsilon(),
            params: PreferenceMapParams::default(),
            fit_params: true,
            max_retries: default_max_retries(),
            workers: default_workers(),
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<(), SynthesisError> {
        let bad = |m: &str| Err(SynthesisError::InvalidConfig(m.to_string()));
        if self.k_samples == 0 {
            return bad("k_samples must be positive");
        }
        if self.retain_sets == 0 || self.retain_sets > self.k_samples {
            return bad("retain_sets must be in 1..=k_samples");
        }
        if !(self.spread_epsilon.is_finite() && self.spread_epsilon >= 0.0) {
            return bad("spread_epsilon must be non-negative");
        }
        PreferenceMapParams::new(self.params.alpha, self.params.beta)?;
        Ok(())
    }
}

/// Sampling seed of selection run `k` for a question.
pub fn run_seed(seed: u64, query_id: &str, k: usize) -> u64 {
    stable_u64(&[
        b"esr",
        &seed.to_le_bytes(),
        query_id.as_bytes(),
        &(k as u64).to_le_bytes(),
    ])
}

/// Counts of what happened while building one instance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstructStats {
    pub runs: usize,
    pub failed_runs: usize,
    pub duplicate_sets: usize,
}

/// Builds the labeled instance for one question.
///
/// Runs whose selection or scoring fails are skipped; identical index sets
/// (as sets) keep their first occurrence. The result may hold a single set,
/// which [`filter_instance`] later drops.
pub fn construct_instance(
    backend: &dyn LlmBackend,
    prompts: &PromptSet,
    example: &QAExample,
    pool: &CandidatePool,
    cfg: &SynthesisConfig,
    seed: u64,
) -> Result<(TrainingInstance, ConstructStats), SynthesisError> {
    example.validate()?;
    pool.validate()?;
    let answer_prompt = prompts.get(TemplateName::Answer);
    let gold = &example.answers[0];
    let baseline =
        baseline_entropy(backend, &example.question, gold, answer_prompt).map_err(|e| {
            if is_scoring_unsupported(&e) {
                SynthesisError::ScoringUnsupported
            } else {
                e.into()
            }
        })?;

    let mut stats = ConstructStats::default();
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut sets = Vec::new();
    let mut last_error = String::new();
    for k in 0..cfg.k_samples {
        stats.runs += 1;
        let esr_cfg = EsrConfig {
            use_answer: true,
            decoding: DecodingParams::sampling().with_seed(run_seed(seed, &example.id, k)),
            max_retries: cfg.max_retries,
            ..EsrConfig::default()
        };
        let selector = Selector::new(backend, prompts, &esr_cfg);
        let refined =
            match selector.esr(&example.id, &example.question, pool, Some(&example.answers)) {
                Ok((refined, _)) => refined,
                Err(e) => {
                    log::warn!("{}: run {k} skipped: {e}", example.id);
                    last_error = e.to_string();
                    stats.failed_runs += 1;
                    continue;
                }
            };
        let mut key = refined.indices.clone();
        key.sort_unstable();
        if !seen.insert(key) {
            stats.duplicate_sets += 1;
            continue;
        }
        match label_set(
            backend,
            &example.question,
            &refined,
            pool,
            gold,
            answer_prompt,
            baseline,
            &cfg.params,
        ) {
            Ok(signal) => sets.push(LabeledSet {
                set: refined,
                signal,
            }),
            Err(e) if is_scoring_unsupported(&e) => return Err(SynthesisError::ScoringUnsupported),
            Err(e) => {
                log::warn!("{}: run {k} scoring failed: {e}", example.id);
                last_error = e.to_string();
                stats.failed_runs += 1;
            }
        }
    }
    if sets.is_empty() {
        return Err(SynthesisError::AllRunsFailed {
            query_id: example.id.clone(),
            last: last_error,
        });
    }
    let mut instance = TrainingInstance {
        query_id: example.id.clone(),
        question: example.question.clone(),
        gold_answers: example.answers.clone(),
        pool: pool.clone(),
        sets,
        best_index: 0,
    };
    instance.refresh_best();
    Ok((instance, stats))
}

/// Recomputes every preference score from its stored entropy change.
pub fn relabel(instance: &mut TrainingInstance, params: &PreferenceMapParams) {
    for s in &mut instance.sets {
        s.signal.p_score = map_preference(s.signal.delta_h, params);
    }
    instance.refresh_best();
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropReason {
    TooFewSets,
    NoPositive,
    LowSpread,
    AllRunsFailed,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::TooFewSets => "too-few-sets",
            DropReason::NoPositive => "no-positive",
            DropReason::LowSpread => "low-spread",
            DropReason::AllRunsFailed => "all-runs-failed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterDecision {
    Keep,
    Drop(DropReason),
}

/// Keeps instances with at least two sets, one helpful set, and a spread
/// of preference scores of at least `spread_epsilon`.
pub fn filter_instance(instance: &TrainingInstance, cfg: &SynthesisConfig) -> FilterDecision {
    let p = instance.p_scores();
    if p.len() < 2 {
        return FilterDecision::Drop(DropReason::TooFewSets);
    }
    if !p.iter().any(|&x| x > 0.0) {
        return FilterDecision::Drop(DropReason::NoPositive);
    }
    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = p.iter().copied().fold(f64::INFINITY, f64::min);
    if max - min < cfg.spread_epsilon {
        return FilterDecision::Drop(DropReason::LowSpread);
    }
    FilterDecision::Keep
}

/// Keeps at most `retain_sets` sets: the best one, then alternately the
/// next highest and the next lowest remaining score. Kept sets stay in
/// their original order.
pub fn retain_sets(instance: &TrainingInstance, cfg: &SynthesisConfig) -> TrainingInstance {
    let n = instance.sets.len();
    if n <= cfg.retain_sets {
        return instance.clone();
    }
    let p = instance.p_scores();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let mut keep = vec![order[0]];
    let (mut top, mut bottom) = (1, n - 1);
    let mut from_top = true;
    while keep.len() < cfg.retain_sets && top <= bottom {
        if from_top {
            keep.push(order[top]);
            top += 1;
        } else {
            keep.push(order[bottom]);
            bottom -= 1;
        }
        from_top = !from_top;
    }
    keep.sort_unstable();
    let mut out = instance.clone();
    out.sets = keep.iter().map(|&i| instance.sets[i].clone()).collect();
    out.refresh_best();
    out
}

/// Reorders the pool so new position `i` holds old position `perm[i]`
/// (both 0-based) and remaps every set. Labels are copied unchanged.
pub fn apply_permutation(instance: &TrainingInstance, perm: &[usize]) -> TrainingInstance {
    let n = instance.pool.len();
    assert_eq!(perm.len(), n, "permutation length");
    let mut inverse = vec![0; n];
    for (new, &old) in perm.iter().enumerate() {
        inverse[old] = new;
    }
    let remap =
        |indices: &[usize]| -> Vec<usize> { indices.iter().map(|&i| inverse[i - 1] + 1).collect() };
    let mut out = instance.clone();
    out.pool.passages = perm
        .iter()
        .map(|&old| instance.pool.passages[old].clone())
        .collect();
    for s in &mut out.sets {
        s.set = EvidenceSet {
            indices: remap(&s.set.indices),
            stage: s.set.stage,
            parent: s.set.parent.as_deref().map(remap),
        };
    }
    out
}

/// `shuffle_copies` seeded permutations of the instance.
pub fn shuffle_augment(
    instance: &TrainingInstance,
    cfg: &SynthesisConfig,
    seed: u64,
) -> Vec<TrainingInstance> {
    (0..cfg.shuffle_copies)
        .map(|c| {
            let s = stable_u64(&[
                b"shuffle",
                &seed.to_le_bytes(),
                instance.query_id.as_bytes(),
                &(c as u64).to_le_bytes(),
            ]);
            let mut perm: Vec<usize> = (0..instance.pool.len()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
            apply_permutation(instance, &perm)
        })
        .collect()
}

pub fn emit_training_jsonl(
    instances: &[TrainingInstance],
    path: &Path,
) -> Result<usize, SynthesisError> {
    let records: Vec<TrainingRecord> = instances.iter().map(TrainingRecord::from).collect();
    Ok(write_jsonl(path, &records)?)
}

pub fn read_training_jsonl(path: &Path) -> Result<Vec<TrainingInstance>, SynthesisError> {
    Ok(read_jsonl::<TrainingRecord>(path)?
        .into_iter()
        .map(TrainingRecord::into_instance)
        .collect())
}

/// Entropy changes of every set, for fitting the preference map.
pub fn delta_samples(instances: &[TrainingInstance]) -> Vec<DeltaSample> {
    instances
        .iter()
        .flat_map(|inst| {
            inst.sets
                .iter()
                .map(|s| DeltaSample::new(s.signal.delta_h, inst.query_id.clone()))
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub questions: usize,
    pub kept: usize,
    pub dropped: BTreeMap<String, usize>,
    pub emitted_records: usize,
    pub selection_runs: usize,
    pub failed_runs: usize,
    pub duplicate_sets: usize,
    pub params: Option<PreferenceMapParams>,
    pub fit: Option<AlphaBetaFit>,
    /// Per-question error messages for dropped questions.
    pub errors: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisOutput {
    /// Kept, retained and augmented instances in dataset order.
    pub instances: Vec<TrainingInstance>,
    /// Every constructed instance before filtering.
    pub constructed: Vec<TrainingInstance>,
    pub report: SynthesisReport,
}

/// Runs construction for every `(example, pool)` pair on `cfg.workers`
/// threads and applies the filter, retention and augmentation steps.
/// Output order follows the input order regardless of scheduling.
pub fn synthesize_dataset(
    backend: &dyn LlmBackend,
    prompts: &PromptSet,
    items: &[(QAExample, CandidatePool)],
    cfg: &SynthesisConfig,
    seed: u64,
    shuffle_seed: u64,
) -> Result<SynthesisOutput, SynthesisError> {
    cfg.validate()?;
    type Slot = Option<Result<(TrainingInstance, ConstructStats), SynthesisError>>;
    let slots: Mutex<Vec<Slot>> = Mutex::new((0..items.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..cfg.workers.clamp(1, items.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((example, pool)) = items.get(i) else {
                    break;
                };
                let result = construct_instance(backend, prompts, example, pool, cfg, seed);
                slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(result);
            });
        }
    });
    let slots = slots.into_inner().unwrap_or_else(|e| e.into_inner());

    let mut report = SynthesisReport {
        questions: items.len(),
        ..SynthesisReport::default()
    };
    let mut constructed = Vec::new();
    for (slot, (example, _)) in slots.into_iter().zip(items) {
        match slot.expect("every slot is filled") {
            Ok((inst, stats)) => {
                report.selection_runs += stats.runs;
                report.failed_runs += stats.failed_runs;
                report.duplicate_sets += stats.duplicate_sets;
                constructed.push(inst);
            }
            Err(SynthesisError::ScoringUnsupported) => {
                return Err(SynthesisError::ScoringUnsupported)
            }
            Err(e) => {
                report.selection_runs += cfg.k_samples;
                report.failed_runs += cfg.k_samples;
                *report
                    .dropped
                    .entry(DropReason::AllRunsFailed.as_str().to_string())
                    .or_insert(0) += 1;
                report.errors.insert(example.id.clone(), e.to_string());
            }
        }
    }

    let mut params = cfg.params;
    if cfg.fit_params {
        let deltas = delta_samples(&constructed);
        if !deltas.is_empty() {
            let fit = fit_alpha_beta(&deltas)?;
            params = fit.params();
            report.fit = Some(fit);
        }
        for inst in &mut constructed {
            relabel(inst, &params);
        }
    }
    report.params = Some(params);

    let mut instances = Vec::new();
    for inst in &constructed {
        match filter_instance(inst, cfg) {
            FilterDecision::Drop(reason) => {
                *report
                    .dropped
                    .entry(reason.as_str().to_string())
                    .or_insert(0) += 1;
            }
            FilterDecision::Keep => {
                report.kept += 1;
                let retained = retain_sets(inst, cfg);
                if cfg.shuffle_copies == 0 {
                    instances.push(retained);
                } else {
                    instances.extend(shuffle_augment(&retained, cfg, shuffle_seed));
                }
            }
        }
    }
    report.emitted_records = instances.len();
    Ok(SynthesisOutput {
        instances,
        constructed,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{LogprobEntry, MockBackend, MockConfig, ScriptRule};
    use crate::model::{validate_instance, Passage, Stage, UtilitySignal};
    use crate::prompts::{render_context, render_prompt, Bindings};

    fn signal(p: f64) -> UtilitySignal {
        let delta_h = if p > 0.0 { -0.1 } else { 0.1 };
        UtilitySignal {
            ppl: (1.0f64 + delta_h).exp(),
            h: 1.0 + delta_h,
            delta_h,
            p_score: p,
        }
    }

    fn instance_with(scores: &[f64]) -> TrainingInstance {
        let pool = CandidatePool::new(
            "q",
            (1..=8)
                .map(|i| Passage::new(i, format!("T{i}"), format!("text {i}")))
                .collect(),
        )
        .unwrap();
        let mut inst = TrainingInstance {
            query_id: "q".into(),
            question: "Q?".into(),
            gold_answers: vec!["a".into()],
            pool,
            sets: scores
                .iter()
                .enumerate()
                .map(|(i, &p)| LabeledSet {
                    set: EvidenceSet::raw(vec![i % 8 + 1]),
                    signal: signal(p),
                })
                .collect(),
            best_index: 0,
        };
        inst.refresh_best();
        inst
    }

    #[test]
    fn filter_rules() {
        let cfg = SynthesisConfig::default();
        assert_eq!(
            filter_instance(&instance_with(&[-0.6, -0.8]), &cfg),
            FilterDecision::Drop(DropReason::NoPositive)
        );
        assert_eq!(
            filter_instance(&instance_with(&[0.70, 0.71]), &cfg),
            FilterDecision::Drop(DropReason::LowSpread)
        );
        assert_eq!(
            filter_instance(&instance_with(&[0.9, -0.7, 0.6]), &cfg),
            FilterDecision::Keep
        );
        assert_eq!(
            filter_instance(&instance_with(&[0.9]), &cfg),
            FilterDecision::Drop(DropReason::TooFewSets)
        );
    }

    #[test]
    fn retention_alternates() {
        let cfg = SynthesisConfig::default();
        // stored out of order to check the kept sets keep their positions
        let inst = instance_with(&[0.7, -0.6, 0.9, -0.9, 0.8, 0.6, -0.7]);
        let kept = retain_sets(&inst, &cfg);
        assert_eq!(kept.p_scores(), vec![0.7, 0.9, -0.9, 0.8, -0.7]);
        assert_eq!(kept.best_index, 1);

        let eight = instance_with(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.95, 0.7]);
        let kept = retain_sets(&eight, &cfg);
        assert_eq!(kept.sets.len(), 5);
        assert!(kept.p_scores().contains(&0.95));

        let four = instance_with(&[0.9, -0.7, 0.6, 0.55]);
        assert_eq!(retain_sets(&four, &cfg), four);
    }

    #[test]
    fn permutation_remaps_sets() {
        let mut inst = instance_with(&[0.9, -0.7]);
        inst.sets[0].set = EvidenceSet::raw(vec![1, 3]);
        let identity: Vec<usize> = (0..8).collect();
        assert_eq!(apply_permutation(&inst, &identity), inst);
        let mut swap = identity.clone();
        swap.swap(0, 1);
        let out = apply_permutation(&inst, &swap);
        assert_eq!(out.sets[0].set.indices, vec![2, 3]);
        assert_eq!(out.sets[0].signal, inst.sets[0].signal);
    }

    #[test]
    fn shuffled_copies_keep_texts_and_labels() {
        let mut inst = instance_with(&[0.9, -0.7, 0.6]);
        let raw = EvidenceSet::raw(vec![4, 2, 7]);
        inst.sets[1].set = EvidenceSet::refined(vec![7, 4], &raw);
        let copies = shuffle_augment(&inst, &SynthesisConfig::default(), 9);
        assert_eq!(copies.len(), 3);
        assert_ne!(copies[0].pool, inst.pool);
        for c in &copies {
            assert_eq!(c.best_index, inst.best_index);
            for (a, b) in c.sets.iter().zip(&inst.sets) {
                assert_eq!(a.signal, b.signal);
                let ta: Vec<&str> = c
                    .pool
                    .select(&a.set.indices)
                    .iter()
                    .map(|p| p.text.as_str())
                    .collect();
                let tb: Vec<&str> = inst
                    .pool
                    .select(&b.set.indices)
                    .iter()
                    .map(|p| p.text.as_str())
                    .collect();
                assert_eq!(ta, tb);
            }
            assert_eq!(c.sets[1].set.stage, Stage::Refined);
            let parent = c.sets[1].set.parent.clone().unwrap();
            let texts: Vec<&str> = c
                .pool
                .select(&parent)
                .iter()
                .map(|p| p.text.as_str())
                .collect();
            assert_eq!(texts, vec!["text 4", "text 2", "text 7"]);
        }
        assert_eq!(
            shuffle_augment(&inst, &SynthesisConfig::default(), 9),
            copies
        );
    }

    fn small_pool() -> CandidatePool {
        CandidatePool::new(
            "q1",
            (1..=3)
                .map(|i| Passage::new(i, format!("T{i}"), format!("text {i}")))
                .collect(),
        )
        .unwrap()
    }

    fn example() -> QAExample {
        QAExample {
            id: "q1".into(),
            question: "Q?".into(),
            answers: vec!["gold".into()],
        }
    }

    fn context_digest(pool: &CandidatePool, indices: &[usize]) -> String {
        let t = crate::prompts::PromptTemplate::builtin(TemplateName::Answer);
        let mut b = Bindings::new().with("question", "Q?");
        if !indices.is_empty() {
            b.set("context", render_context(pool.select(indices)));
        }
        crate::sha256_hex(render_prompt(&t, &b).unwrap())
    }

    #[test]
    fn scripted_instance_labels_and_best() {
        let pool = small_pool();
        let rules = vec![
            ScriptRule::new("Generate all questions", "### Queries: a\n"),
            ScriptRule::sequence(
                "Please follow",
                vec![
                    "### Final Selection: [1] [2]".into(),
                    "### Final Selection: [2]".into(),
                    "### Final Selection: [3]".into(),
                ],
            ),
            ScriptRule::new("Exclude", "### Final Selection: [1] [2] [3]"),
        ];
        // H0 = 1.0; sets [1,2] -> 0.6, [2] -> 0.9, [3] -> 1.3
        let entry = |indices: &[usize], h: f64| LogprobEntry {
            context: context_digest(&pool, indices),
            token: "gold".into(),
            logprob: -h,
        };
        let mock = MockBackend::new(MockConfig {
            rules,
            logprob_table: vec![
                entry(&[], 1.0),
                entry(&[1, 2], 0.6),
                entry(&[2], 0.9),
                entry(&[3], 1.3),
            ],
            ..MockConfig::default()
        });
        let cfg = SynthesisConfig {
            k_samples: 3,
            retain_sets: 3,
            ..SynthesisConfig::default()
        };
        let (inst, stats) =
            construct_instance(&mock, &PromptSet::builtin(), &example(), &pool, &cfg, 1).unwrap();
        assert_eq!(stats.failed_runs, 0);
        let deltas: Vec<f64> = inst.sets.iter().map(|s| s.signal.delta_h).collect();
        for (d, e) in deltas.iter().zip([-0.4, -0.1, 0.3]) {
            assert!((d - e).abs() < 1e-12);
        }
        let signs: Vec<bool> = inst.p_scores().iter().map(|p| *p > 0.0).collect();
        assert_eq!(signs, vec![true, true, false]);
        assert_eq!(inst.best_index, 0);
        for s in &inst.sets {
            assert_eq!(
                s.signal.p_score,
                map_preference(s.signal.delta_h, &cfg.params)
            );
        }
        validate_instance(inst).unwrap();
    }

    #[test]
    fn identical_runs_collapse() {
        let rules = vec![
            ScriptRule::new("Generate all questions", "### Queries: a\n"),
            ScriptRule::new("Please follow", "### Final Selection: [2] [1]"),
            ScriptRule::new("Exclude", "### Final Selection: [2] [1]"),
        ];
        let mock = MockBackend::new(MockConfig {
            rules,
            ..MockConfig::default()
        });
        let cfg = SynthesisConfig::default();
        let (inst, stats) = construct_instance(
            &mock,
            &PromptSet::builtin(),
            &example(),
            &small_pool(),
            &cfg,
            1,
        )
        .unwrap();
        assert_eq!(inst.sets.len(), 1);
        assert_eq!(stats.duplicate_sets, 9);
        assert_eq!(
            filter_instance(&inst, &cfg),
            FilterDecision::Drop(DropReason::TooFewSets)
        );
    }

    #[test]
    fn failing_scoring_skips_the_run() {
        let rules = vec![
            ScriptRule::new("Generate all questions", "### Queries: a\n"),
            ScriptRule::sequence(
                "Please follow",
                vec![
                    "### Final Selection: [1]".into(),
                    "### Final Selection: [2]".into(),
                    "### Final Selection: [3]".into(),
                ],
            ),
            ScriptRule::new("Exclude", "### Final Selection: [1]"),
        ];
        let mock = MockBackend::new(MockConfig {
            rules,
            fail_scoring_when: vec!["[1] T2\n".into()],
            ..MockConfig::default()
        });
        let cfg = SynthesisConfig {
            k_samples: 3,
            retain_sets: 3,
            ..SynthesisConfig::default()
        };
        let (inst, stats) = construct_instance(
            &mock,
            &PromptSet::builtin(),
            &example(),
            &small_pool(),
            &cfg,
            1,
        )
        .unwrap();
        assert_eq!(stats.failed_runs, 1);
        let sets: Vec<Vec<usize>> = inst.sets.iter().map(|s| s.set.indices.clone()).collect();
        assert_eq!(sets, vec![vec![1], vec![3]]);
    }

    #[test]
    fn all_runs_failing() {
        let mock = MockBackend::new(MockConfig::default());
        let err = construct_instance(
            &mock,
            &PromptSet::builtin(),
            &example(),
            &small_pool(),
            &SynthesisConfig::default(),
            1,
        )
        .unwrap_err();
        assert!(matches!(err, SynthesisError::AllRunsFailed { .. }), "{err}");

        let no_scoring = MockBackend::new(MockConfig {
            scoring_supported: false,
            ..MockConfig::default()
        });
        let err = construct_instance(
            &no_scoring,
            &PromptSet::builtin(),
            &example(),
            &small_pool(),
            &SynthesisConfig::default(),
            1,
        )
        .unwrap_err();
        assert!(matches!(err, SynthesisError::ScoringUnsupported));
    }

    #[test]
    fn emission_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        let a = instance_with(&[0.9, -0.7]);
        let b = instance_with(&[0.6, 0.8, -0.9]);
        assert_eq!(
            emit_training_jsonl(&[a.clone(), b.clone()], &path).unwrap(),
            2
        );
        assert_eq!(read_training_jsonl(&path).unwrap(), vec![a, b]);
        assert_eq!(emit_training_jsonl(&[], &path).unwrap(), 0);
        assert!(matches!(
            emit_training_jsonl(&[], Path::new("/nonexistent/x.jsonl")),
            Err(SynthesisError::Record(RecordError::Io { .. }))
        ));
    }

    #[test]
    fn config_validation() {
        let bad = SynthesisConfig {
            retain_sets: 11,
            ..SynthesisConfig::default()
        };
        assert!(matches!(
            bad.validate(),
            Err(SynthesisError::InvalidConfig(_))
        ));
        let cfg: SynthesisConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, SynthesisConfig::default());
    }
}
