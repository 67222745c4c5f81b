mod common;

use optiset_core::backend::DecodingParams;
use optiset_core::model::Stage;
use optiset_core::prompts::PromptSet;
use optiset_core::records::{parse_jsonl, write_jsonl_to, TrainingRecord};
use optiset_core::selection::{EsrConfig, Selector};
use optiset_core::synthesis::{
    filter_instance, retain_sets, shuffle_augment, synthesize_dataset, FilterDecision,
    SynthesisConfig,
};
use optiset_core::utility::map_preference;

#[test]
fn fixture_shape() {
    let items = common::items();
    assert_eq!(items.len(), 12);
    for (e, pool) in &items {
        assert_eq!(pool.len(), common::POOL_K);
        assert_eq!(pool.query_id, e.id);
        e.validate().unwrap();
    }
}

#[test]
fn training_free_selection_is_compact() {
    let mock = common::mock();
    let prompts = PromptSet::builtin();
    let cfg = EsrConfig {
        decoding: DecodingParams::greedy(),
        ..EsrConfig::default()
    };
    let selector = Selector::new(&mock, &prompts, &cfg);
    for (e, pool) in common::items() {
        let (set, trace) = selector.esr(&e.id, &e.question, &pool, None).unwrap();
        trace.check_subset_chain(pool.len()).unwrap();
        assert_eq!(set.stage, Stage::Refined);
        assert!(!set.is_empty() && set.len() <= trace.raw_set.len());
        assert!(!trace.llm_texts.is_empty());
    }
}

#[test]
fn synthesis_keeps_labeled_instances() {
    let mock = common::mock();
    let cfg = SynthesisConfig::default();
    let out =
        synthesize_dataset(&mock, &PromptSet::builtin(), &common::items(), &cfg, 7, 8).unwrap();
    let r = &out.report;
    assert_eq!(r.questions, 12);
    assert!(r.kept >= 1);
    assert_eq!(r.kept + r.dropped.values().sum::<usize>(), 12);
    assert_eq!(r.emitted_records, r.kept * cfg.shuffle_copies);
    assert_eq!(out.instances.len(), r.emitted_records);
    let params = r.params.unwrap();
    for inst in &out.instances {
        assert!(inst.sets.len() >= 2 && inst.sets.len() <= cfg.retain_sets);
        for s in &inst.sets {
            assert_eq!(s.signal.p_score, map_preference(s.signal.delta_h, &params));
            assert!((s.signal.h - s.signal.ppl.ln()).abs() < 1e-12);
        }
        let best = inst.sets[inst.best_index].signal.p_score;
        assert!(inst.sets.iter().all(|s| s.signal.p_score <= best));
    }
}

#[test]
fn shuffled_copies_keep_texts_and_labels() {
    let mock = common::mock();
    let cfg = SynthesisConfig::default();
    let out =
        synthesize_dataset(&mock, &PromptSet::builtin(), &common::items(), &cfg, 7, 8).unwrap();
    let kept: Vec<_> = out
        .constructed
        .iter()
        .filter(|i| filter_instance(i, &cfg) == FilterDecision::Keep)
        .collect();
    assert!(!kept.is_empty());
    for inst in kept {
        let base = retain_sets(inst, &cfg);
        let texts = |i: &optiset_core::model::TrainingInstance| -> Vec<Vec<String>> {
            i.sets
                .iter()
                .map(|s| {
                    i.pool
                        .select(&s.set.indices)
                        .iter()
                        .map(|p| p.text.clone())
                        .collect()
                })
                .collect()
        };
        for copy in shuffle_augment(&base, &cfg, 8) {
            assert_eq!(texts(&copy), texts(&base));
            assert_eq!(copy.best_index, base.best_index);
            let labels = |i: &optiset_core::model::TrainingInstance| -> Vec<_> {
                i.sets.iter().map(|s| s.signal).collect()
            };
            assert_eq!(labels(&copy), labels(&base));
        }
    }
}

#[test]
fn training_jsonl_round_trip_is_byte_stable() {
    let mock = common::mock();
    let out = synthesize_dataset(
        &mock,
        &PromptSet::builtin(),
        &common::items(),
        &SynthesisConfig::default(),
        3,
        4,
    )
    .unwrap();
    let records: Vec<TrainingRecord> = out.instances.iter().map(TrainingRecord::from).collect();
    let mut first = Vec::new();
    write_jsonl_to(&mut first, &records).unwrap();
    let back: Vec<TrainingRecord> = parse_jsonl(first.as_slice(), "memory").unwrap();
    let instances: Vec<_> = back.into_iter().map(|r| r.into_instance()).collect();
    assert_eq!(instances, out.instances);
    let mut second = Vec::new();
    write_jsonl_to(
        &mut second,
        &instances
            .iter()
            .map(TrainingRecord::from)
            .collect::<Vec<_>>(),
    )
    .unwrap();
    assert_eq!(first, second);
}

#[test]
fn unsupported_scoring_aborts_synthesis() {
    let cfg: optiset_core::backend::MockConfig =
        serde_json::from_str(r#"{"fallback": "heuristic", "scoring_supported": false}"#).unwrap();
    let mock = optiset_core::backend::MockBackend::new(cfg);
    let err = synthesize_dataset(
        &mock,
        &PromptSet::builtin(),
        &common::items()[..2],
        &SynthesisConfig::default(),
        1,
        1,
    )
    .unwrap_err();
    assert!(matches!(
        err,
        optiset_core::synthesis::SynthesisError::ScoringUnsupported
    ));
}
