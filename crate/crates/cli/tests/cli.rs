use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/mock12/config.json")
}

fn optiset(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_optiset"))
        .arg("--config")
        .arg(fixture_config())
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) {
    let o = optiset(out, args);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn training_free_select_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["select", "--query-id", "q01", "--training-free"],
    );
    let trace = json(&dir.path().join("q01.trace.json"));
    assert_eq!(trace["query_id"], "q01");
    let raw: Vec<u64> = serde_json::from_value(trace["raw_set"]["indices"].clone()).unwrap();
    let refined: Vec<u64> =
        serde_json::from_value(trace["refined_set"]["indices"].clone()).unwrap();
    assert!(!refined.is_empty());
    assert!(refined.iter().all(|i| raw.contains(i)));
    assert!(raw.iter().all(|&i| (1..=20).contains(&i)));
    assert!(!dir.path().join("selections.jsonl").exists());
}

#[test]
fn unknown_query_id_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = optiset(dir.path(), &["select", "--query-id", "nope"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn synthesize_fixture_keeps_instances_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), &["synthesize"]);
    ok(b.path(), &["synthesize"]);
    let report = json(&a.path().join("synthesis_report.json"));
    assert_eq!(report["questions"], 12);
    assert!(report["kept"].as_u64().unwrap() >= 1);
    let dropped: BTreeMap<String, u64> = serde_json::from_value(report["dropped"].clone()).unwrap();
    assert_eq!(
        report["kept"].as_u64().unwrap() + dropped.values().sum::<u64>(),
        12
    );
    for name in ["train.jsonl", "deltas.jsonl", "synthesis_report.json"] {
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap(),
            "{name} differs"
        );
    }
    let train = std::fs::read_to_string(a.path().join("train.jsonl")).unwrap();
    for line in train.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["id", "question", "passages", "sets", "best_index"] {
            assert!(rec.get(key).is_some(), "missing {key}");
        }
    }

    ok(a.path(), &["fit-alphabeta"]);
    let fit = json(&a.path().join("alphabeta.json"));
    for key in ["alpha", "beta"] {
        let v = fit[key].as_f64().unwrap();
        assert!((0.01..=10.0).contains(&v));
    }
    assert!(fit["objective"].as_f64().unwrap() >= 0.0);
}

#[test]
fn different_seed_changes_training_data() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), &["synthesize"]);
    ok(b.path(), &["--seed", "8", "synthesize"]);
    let m = json(&b.path().join("synthesize.manifest.json"));
    assert_eq!(m["seed"], 8);
    assert_ne!(
        std::fs::read(a.path().join("train.jsonl")).unwrap(),
        std::fs::read(b.path().join("train.jsonl")).unwrap()
    );
}

#[test]
fn evaluate_without_selections_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = optiset(dir.path(), &["evaluate"]);
    assert_eq!(o.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("selections.jsonl"), "{stderr}");
}

#[test]
fn full_chain_with_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for args in [
        &["ingest"][..],
        &["retrieve"],
        &["select"],
        &["evaluate", "--run-id", "mock"],
        &["novelty"],
        &["losscheck"],
    ] {
        ok(d, args);
    }
    let agg = std::fs::read_to_string(d.join("eval_aggregate.csv")).unwrap();
    let mut lines = agg.lines();
    assert_eq!(
        lines.next().unwrap(),
        "run_id,n_queries,em,f1,avg_doc,novel_all,novel_2,novel_3,sim_kind"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "mock");
    assert_eq!(row[1], "12");
    let avg_doc: f64 = row[4].parse().unwrap();
    assert!((1.0..=20.0).contains(&avg_doc));

    let report = json(&d.join("losscheck_report.json"));
    assert_eq!(report["passed"], true);
    assert!(
        json(&d.join("loss_parity_fixture.json"))["cases"]
            .as_array()
            .unwrap()
            .len()
            >= 5
    );

    let mut owners: BTreeMap<String, usize> = BTreeMap::new();
    let mut files = Vec::new();
    for entry in std::fs::read_dir(d).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        if name.ends_with(".manifest.json") {
            let m = json(&d.join(&name));
            assert!(m["config_sha256"].as_str().unwrap().len() == 64);
            for o in m["outputs"].as_array().unwrap() {
                *owners
                    .entry(o["path"].as_str().unwrap().to_string())
                    .or_default() += 1;
            }
        } else {
            files.push(name);
        }
    }
    for f in &files {
        assert_eq!(
            owners.get(f),
            Some(&1),
            "{f} is not owned by exactly one manifest"
        );
    }
}

#[test]
fn unreachable_backend_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    let corpus = fixture_config().with_file_name("corpus.jsonl");
    let dataset = fixture_config().with_file_name("dataset.jsonl");
    std::fs::write(
        &cfg,
        serde_json::json!({
            "backend": {"base_url": "http://127.0.0.1:9", "model_name": "m", "timeout_secs": 2},
            "paths": {"corpus": corpus, "dataset": dataset, "out_dir": dir.path().join("out")},
            "selection": {"max_retries": 0}
        })
        .to_string(),
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_optiset"))
        .args(["--config"])
        .arg(&cfg)
        .args(["select", "--query-id", "q01"])
        .output()
        .unwrap();
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn invalid_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"retrieval": {"k": 0}, "paths": {"out_dir": "out"}}"#,
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_optiset"))
        .arg("--config")
        .arg(&cfg)
        .arg("ingest")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = Command::new(env!("CARGO_BIN_EXE_optiset"))
        .arg("--config")
        .arg(dir.path().join("missing.json"))
        .arg("ingest")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}
