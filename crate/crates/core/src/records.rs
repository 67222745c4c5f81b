//! Line-delimited JSON records exchanged between stages.
//!
//! Dataset lines are [`QAExample`]s, selection lines are [`SelectionRecord`]s
//! and training lines are [`TrainingRecord`]s. Training records carry three
//! optional fields beyond the fixed contract (`answers`, per-set
//! `raw_indices`, per-passage `score`) so that instances survive a round
//! trip unchanged; readers that do not know them can ignore them.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    CandidatePool, EvidenceSet, LabeledSet, ModelError, Passage, Stage, TrainingInstance,
    UtilitySignal,
};

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl RecordError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        RecordError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// One line of a selections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub id: String,
    pub indices: Vec<usize>,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageRecord {
    pub pid: u64,
    pub title: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetRecord {
    pub indices: Vec<usize>,
    pub ppl: f64,
    pub h: f64,
    pub delta_h: f64,
    pub p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_indices: Option<Vec<usize>>,
}

/// One line of a training file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub id: String,
    pub question: String,
    pub passages: Vec<PassageRecord>,
    pub sets: Vec<SetRecord>,
    pub best_index: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub answers: Vec<String>,
}

impl From<&TrainingInstance> for TrainingRecord {
    fn from(inst: &TrainingInstance) -> Self {
        Self {
            id: inst.query_id.clone(),
            question: inst.question.clone(),
            passages: inst
                .pool
                .passages
                .iter()
                .map(|p| PassageRecord {
                    pid: p.id,
                    title: p.title.clone(),
                    text: p.text.clone(),
                    score: p.retrieval_score,
                })
                .collect(),
            sets: inst
                .sets
                .iter()
                .map(|s| SetRecord {
                    indices: s.set.indices.clone(),
                    ppl: s.signal.ppl,
                    h: s.signal.h,
                    delta_h: s.signal.delta_h,
                    p: s.signal.p_score,
                    raw_indices: s.set.parent.clone(),
                })
                .collect(),
            best_index: inst.best_index,
            answers: inst.gold_answers.clone(),
        }
    }
}

impl TrainingRecord {
    /// Rebuilds the instance. Invariants are not checked here; pass the
    /// result through [`crate::model::validate_instance`] when needed.
    pub fn into_instance(self) -> TrainingInstance {
        let passages = self
            .passages
            .into_iter()
            .map(|p| Passage {
                id: p.pid,
                title: p.title,
                text: p.text,
                retrieval_score: p.score,
            })
            .collect();
        let sets = self
            .sets
            .into_iter()
            .map(|s| LabeledSet {
                set: EvidenceSet {
                    stage: if s.raw_indices.is_some() {
                        Stage::Refined
                    } else {
                        Stage::Raw
                    },
                    indices: s.indices,
                    parent: s.raw_indices,
                },
                signal: UtilitySignal {
                    ppl: s.ppl,
                    h: s.h,
                    delta_h: s.delta_h,
                    p_score: s.p,
                },
            })
            .collect();
        TrainingInstance {
            pool: CandidatePool {
                query_id: self.id.clone(),
                passages,
            },
            query_id: self.id,
            question: self.question,
            gold_answers: self.answers,
            sets,
            best_index: self.best_index,
        }
    }
}

/// Parses JSONL from a reader; blank lines are skipped. `label` names the
/// source in errors.
pub fn parse_jsonl<T: DeserializeOwned, R: BufRead>(
    reader: R,
    label: &str,
) -> Result<Vec<T>, RecordError> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| RecordError::Io {
            path: label.to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|source| RecordError::Parse {
            path: label.to_string(),
            line: n + 1,
            source,
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, RecordError> {
    let file = File::open(path).map_err(|e| RecordError::io(path, e))?;
    parse_jsonl(BufReader::new(file), &path.display().to_string())
}

/// Writes one compact JSON object per line, each terminated by `\n`.
pub fn write_jsonl_to<T: Serialize, W: Write>(
    mut writer: W,
    items: &[T],
) -> Result<usize, RecordError> {
    for item in items {
        serde_json::to_writer(&mut writer, item)?;
        writer.write_all(b"\n").map_err(RecordError::from_write)?;
    }
    writer.flush().map_err(RecordError::from_write)?;
    Ok(items.len())
}

impl RecordError {
    fn from_write(source: std::io::Error) -> Self {
        RecordError::Io {
            path: "<writer>".into(),
            source,
        }
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<usize, RecordError> {
    let file = File::create(path).map_err(|e| RecordError::io(path, e))?;
    write_jsonl_to(BufWriter::new(file), items).map_err(|e| match e {
        RecordError::Io { source, .. } => RecordError::io(path, source),
        other => other,
    })
}
