use optiset_core::loss::kl_loss;
use optiset_core::model::PreferenceMapParams;
use optiset_core::records::{
    parse_jsonl, write_jsonl_to, PassageRecord, SetRecord, TrainingRecord,
};
use optiset_core::selection::{parse_final_selection, render_final_selection};
use optiset_core::utility::{inverse_preference, ks_distance, map_preference};
use proptest::prelude::*;

fn params() -> impl Strategy<Value = PreferenceMapParams> {
    (0.01f64..10.0, 0.01f64..10.0).prop_map(|(a, b)| PreferenceMapParams::new(a, b).unwrap())
}

fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, len).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    })
}

fn finite() -> impl Strategy<Value = f64> {
    -1e6f64..1e6
}

prop_compose! {
    fn set_record()(
        indices in prop::collection::vec(1usize..30, 1..6),
        ppl in 1.0f64..1e4,
        delta_h in finite(),
        p in -1.0f64..1.0,
        raw in prop::option::of(prop::collection::vec(1usize..30, 1..8)),
    ) -> SetRecord {
        SetRecord { indices, ppl, h: ppl.ln(), delta_h, p, raw_indices: raw }
    }
}

prop_compose! {
    fn training_record()(
        id in "[a-z0-9]{1,8}",
        question in "\\PC{0,40}",
        passages in prop::collection::vec(
            (any::<u64>(), "\\PC{0,12}", "\\PC{0,60}", prop::option::of(finite())),
            1..5,
        ),
        sets in prop::collection::vec(set_record(), 1..4),
        answers in prop::collection::vec("\\PC{1,10}", 0..3),
    ) -> TrainingRecord {
        let best_index = sets.len() - 1;
        TrainingRecord {
            id,
            question,
            passages: passages
                .into_iter()
                .map(|(pid, title, text, score)| PassageRecord { pid, title, text, score })
                .collect(),
            sets,
            best_index,
            answers,
        }
    }
}

proptest! {
    #[test]
    fn selection_line_round_trips(
        (pool, picks) in (1usize..60).prop_flat_map(|n| (Just(n), prop::sample::subsequence((1..=n).collect::<Vec<_>>(), 1..=n))),
        prefix in "[a-zA-Z ,.]{0,80}",
    ) {
        let text = format!("{prefix}\n{}", render_final_selection(&picks));
        prop_assert_eq!(parse_final_selection(&text, pool).unwrap(), picks);
    }

    #[test]
    fn parsed_indices_stay_in_pool(text in "\\PC{0,120}", pool in 1usize..50) {
        if let Ok(ix) = parse_final_selection(&text, pool) {
            prop_assert!(!ix.is_empty());
            prop_assert!(ix.iter().all(|i| (1..=pool).contains(i)));
        }
    }

    #[test]
    fn map_is_decreasing_and_bounded(p in params(), x in -50.0f64..50.0, step in 1e-3f64..1.0) {
        let y = map_preference(x, &p);
        prop_assert!(y.is_finite());
        if x <= 0.0 {
            prop_assert!((0.5..=1.0).contains(&y));
        } else {
            prop_assert!((-1.0..=-0.5).contains(&y));
        }
        let z = map_preference(x + step, &p);
        prop_assert!(z <= y);
        if x.abs() < 3.0 && (x + step).abs() < 3.0 && (x <= 0.0) == (x + step <= 0.0) {
            prop_assert!(z < y);
        }
    }

    #[test]
    fn inverse_recovers_delta(p in params(), t in -10.0f64..10.0) {
        let x = if t <= 0.0 { t / p.alpha } else { t / p.beta };
        let back = inverse_preference(map_preference(x, &p), &p);
        prop_assert!((back - x).abs() <= 1e-6 * x.abs().max(1.0), "{} -> {}", x, back);
    }

    #[test]
    fn ks_is_a_distance(samples in prop::collection::vec(-2.0f64..2.0, 1..80)) {
        let d = ks_distance(&samples, -1.0, 1.0).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        let n = samples.len() as f64;
        prop_assert!(d >= 0.5 / n - 1e-12);
    }

    #[test]
    fn kl_is_nonnegative((p, q) in (2usize..8).prop_flat_map(|m| (distribution(m), distribution(m)))) {
        let kl = kl_loss(&p, &q).unwrap();
        prop_assert!(kl >= -1e-12);
        prop_assert!(kl_loss(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn training_record_round_trips(rec in training_record()) {
        let mut buf = Vec::new();
        write_jsonl_to(&mut buf, std::slice::from_ref(&rec)).unwrap();
        let back: Vec<TrainingRecord> = parse_jsonl(buf.as_slice(), "mem").unwrap();
        prop_assert_eq!(&back, &vec![rec]);
        let mut again = Vec::new();
        write_jsonl_to(&mut again, &back).unwrap();
        prop_assert_eq!(buf, again);
    }
}
