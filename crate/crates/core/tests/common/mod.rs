#![allow(dead_code)]

use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use optiset_core::backend::{MockBackend, MockConfig};
use optiset_core::model::{CandidatePool, QAExample};
use optiset_core::records::read_jsonl;
use optiset_core::retrieval::{ingest_corpus, Bm25Params, CorpusIndex};

pub const POOL_K: usize = 20;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures/mock12")
        .join(name)
}

pub fn mock() -> MockBackend {
    let cfg: MockConfig =
        serde_json::from_reader(File::open(fixture("mock.json")).expect("mock.json"))
            .expect("valid mock config");
    MockBackend::new(cfg)
}

pub fn index() -> CorpusIndex {
    let file = File::open(fixture("corpus.jsonl")).expect("corpus.jsonl");
    ingest_corpus(BufReader::new(file), Bm25Params::default()).expect("valid corpus")
}

pub fn dataset() -> Vec<QAExample> {
    read_jsonl(&fixture("dataset.jsonl")).expect("valid dataset")
}

/// The twelve fixture questions paired with their top-20 pools.
pub fn items() -> Vec<(QAExample, CandidatePool)> {
    let index = index();
    dataset()
        .into_iter()
        .map(|e| {
            let pool = index.retrieve(&e.id, &e.question, POOL_K).expect("pool");
            (e, pool)
        })
        .collect()
}
