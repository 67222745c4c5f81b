use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use log::info;
use optiset_core::backend::LlmBackend;
use optiset_core::loss::{parity_fixture, run_loss_checks};
use optiset_core::metrics::{
    aggregate, evaluate_run, novelty as set_novelty, novelty_report, write_aggregate_csv,
    write_per_query_csv, MetricsError, SimilarityKind,
};
use optiset_core::model::{CandidatePool, QAExample};
use optiset_core::prompts::{PromptSet, TemplateName};
use optiset_core::records::{read_jsonl, RecordError, SelectionRecord, TrainingRecord};
use optiset_core::retrieval::{ingest_corpus, CorpusIndex, RetrievalError};
use optiset_core::selection::{EsrConfig, EsrError, SelectionError, Selector};
use optiset_core::synthesis::{delta_samples, synthesize_dataset, SynthesisError};
use optiset_core::utility::{fit_alpha_beta, DeltaSample, UtilityError};
use serde::Serialize;

use crate::config::{require_file, RunConfig};
use crate::error::CliError;
use crate::manifest::Outputs;

pub const INDEX_FILE: &str = "index.json";
pub const POOLS_FILE: &str = "pools.jsonl";
pub const SELECTIONS_FILE: &str = "selections.jsonl";
pub const TRACES_FILE: &str = "traces.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const DELTAS_FILE: &str = "deltas.jsonl";

pub struct Context {
    pub cfg: RunConfig,
    config_bytes: Vec<u8>,
    pub out_dir: PathBuf,
}

impl Context {
    pub fn new(cfg: RunConfig, config_bytes: Vec<u8>) -> Result<Self, CliError> {
        let out_dir = cfg.out_dir()?;
        Ok(Self {
            cfg,
            config_bytes,
            out_dir,
        })
    }

    fn outputs(&self, command: &str) -> Outputs {
        Outputs::new(&self.out_dir, command, &self.config_bytes, self.cfg.seed)
    }

    fn prompts(&self) -> Result<PromptSet, CliError> {
        match &self.cfg.paths.prompts_dir {
            Some(dir) => PromptSet::load_dir(dir).map_err(|e| CliError::Input(e.to_string())),
            None => Ok(PromptSet::builtin()),
        }
    }

    fn dataset(&self, out: &mut Outputs) -> Result<Vec<QAExample>, CliError> {
        let path = self.cfg.dataset()?;
        out.input(&path)?;
        read_jsonl(&path).map_err(record_err)
    }

    /// Loads the saved index, or builds one in memory from the corpus.
    fn index(&self, out: &mut Outputs) -> Result<CorpusIndex, CliError> {
        let saved = self.out_dir.join(INDEX_FILE);
        if saved.exists() {
            out.input(&saved)?;
            return CorpusIndex::load(&saved).map_err(retrieval_err);
        }
        let corpus = self.cfg.corpus()?;
        out.input(&corpus)?;
        let file = File::open(&corpus).map_err(|e| CliError::io(&corpus, e))?;
        ingest_corpus(BufReader::new(file), self.cfg.retrieval.bm25()).map_err(retrieval_err)
    }

    /// Saved pools when present, otherwise fresh retrieval.
    fn pools(
        &self,
        dataset: &[QAExample],
        out: &mut Outputs,
    ) -> Result<BTreeMap<String, CandidatePool>, CliError> {
        let saved = self.out_dir.join(POOLS_FILE);
        if saved.exists() {
            out.input(&saved)?;
            let pools: Vec<CandidatePool> = read_jsonl(&saved).map_err(record_err)?;
            return Ok(pools.into_iter().map(|p| (p.query_id.clone(), p)).collect());
        }
        let index = self.index(out)?;
        dataset
            .iter()
            .map(|e| {
                let pool = index
                    .retrieve(&e.id, &e.question, self.cfg.retrieval.k)
                    .map_err(retrieval_err)?;
                Ok((e.id.clone(), pool))
            })
            .collect()
    }

    fn selections(
        &self,
        path: Option<PathBuf>,
        out: &mut Outputs,
    ) -> Result<BTreeMap<String, Vec<usize>>, CliError> {
        let path = path.unwrap_or_else(|| self.out_dir.join(SELECTIONS_FILE));
        if !path.exists() {
            return Err(CliError::Input(format!(
                "selections file {} does not exist",
                path.display()
            )));
        }
        out.input(&path)?;
        let records: Vec<SelectionRecord> = read_jsonl(&path).map_err(record_err)?;
        Ok(records.into_iter().map(|r| (r.id, r.indices)).collect())
    }
}

fn record_err(e: RecordError) -> CliError {
    match e {
        RecordError::Model(m) => CliError::Invariant(m.to_string()),
        other => CliError::Input(other.to_string()),
    }
}

fn retrieval_err(e: RetrievalError) -> CliError {
    match e {
        RetrievalError::Model(m) => CliError::Invariant(m.to_string()),
        other => CliError::Input(other.to_string()),
    }
}

fn esr_err(e: EsrError) -> CliError {
    match &e.source {
        SelectionError::Backend(_) | SelectionError::ParseFailure { .. } => {
            CliError::Backend(e.to_string())
        }
        SelectionError::Model(_) => CliError::Invariant(e.to_string()),
        _ => CliError::Input(e.to_string()),
    }
}

fn synthesis_err(e: SynthesisError) -> CliError {
    match &e {
        SynthesisError::ScoringUnsupported
        | SynthesisError::AllRunsFailed { .. }
        | SynthesisError::Utility(UtilityError::Backend(_)) => CliError::Backend(e.to_string()),
        SynthesisError::InvalidConfig(_) | SynthesisError::Record(_) => {
            CliError::Input(e.to_string())
        }
        _ => CliError::Invariant(e.to_string()),
    }
}

fn metrics_err(e: MetricsError) -> CliError {
    match &e {
        MetricsError::Backend(_) => CliError::Backend(e.to_string()),
        MetricsError::EmptySet | MetricsError::Model(_) => CliError::Invariant(e.to_string()),
        _ => CliError::Input(e.to_string()),
    }
}

pub fn ingest(ctx: &Context) -> Result<(), CliError> {
    let mut out = ctx.outputs("ingest");
    let corpus = ctx.cfg.corpus()?;
    out.input(&corpus)?;
    let file = File::open(&corpus).map_err(|e| CliError::io(&corpus, e))?;
    let index =
        ingest_corpus(BufReader::new(file), ctx.cfg.retrieval.bm25()).map_err(retrieval_err)?;
    info!("indexed {} documents", index.len());
    out.write_json(INDEX_FILE, &index)?;
    out.finish()?;
    Ok(())
}

pub fn retrieve(ctx: &Context) -> Result<(), CliError> {
    let mut out = ctx.outputs("retrieve");
    let dataset = ctx.dataset(&mut out)?;
    let index = ctx.index(&mut out)?;
    let pools = dataset
        .iter()
        .map(|e| {
            index
                .retrieve(&e.id, &e.question, ctx.cfg.retrieval.k)
                .map_err(retrieval_err)
        })
        .collect::<Result<Vec<_>, _>>()?;
    out.write_jsonl(POOLS_FILE, &pools)?;
    out.finish()?;
    Ok(())
}

pub fn select(
    ctx: &Context,
    query_id: Option<&str>,
    use_answer: Option<bool>,
) -> Result<(), CliError> {
    let mut out = ctx.outputs("select");
    let dataset = ctx.dataset(&mut out)?;
    let dataset: Vec<QAExample> = match query_id {
        Some(id) => {
            let found: Vec<_> = dataset.into_iter().filter(|e| e.id == id).collect();
            if found.is_empty() {
                return Err(CliError::Input(format!(
                    "query id {id} is not in the dataset"
                )));
            }
            found
        }
        None => dataset,
    };
    let pools = ctx.pools(&dataset, &mut out)?;
    let prompts = ctx.prompts()?;
    let backend = ctx.cfg.build_backend()?;
    let seed = out.seed("select");
    let mut esr_cfg: EsrConfig = ctx.cfg.selection.clone();
    if let Some(flag) = use_answer {
        esr_cfg.use_answer = flag;
    }
    esr_cfg.decoding.seed = seed;
    let selector = Selector::new(backend.as_ref(), &prompts, &esr_cfg);

    let mut selections = Vec::new();
    let mut traces = Vec::new();
    for example in &dataset {
        let pool = pools
            .get(&example.id)
            .ok_or_else(|| CliError::Input(format!("no pool for {}", example.id)))?;
        let gold = esr_cfg.use_answer.then_some(example.answers.as_slice());
        let (set, trace) = selector
            .esr(&example.id, &example.question, pool, gold)
            .map_err(esr_err)?;
        trace
            .check_subset_chain(pool.len())
            .map_err(|e| CliError::Invariant(format!("{}: {e}", example.id)))?;
        info!("{}: {:?}", example.id, set.indices);
        selections.push(SelectionRecord {
            id: example.id.clone(),
            indices: set.indices,
            stage: set.stage,
        });
        traces.push(trace);
    }
    match query_id {
        Some(id) => {
            out.write_json(&format!("{id}.trace.json"), &traces[0])?;
        }
        None => {
            out.write_jsonl(SELECTIONS_FILE, &selections)?;
            out.write_jsonl(TRACES_FILE, &traces)?;
        }
    }
    out.finish()?;
    Ok(())
}

pub fn synthesize(ctx: &Context) -> Result<(), CliError> {
    let mut out = ctx.outputs("synthesize");
    let dataset = ctx.dataset(&mut out)?;
    for e in &dataset {
        e.validate().map_err(|e| CliError::Input(e.to_string()))?;
    }
    let mut pools = ctx.pools(&dataset, &mut out)?;
    let items = dataset
        .into_iter()
        .map(|e| {
            let pool = pools
                .remove(&e.id)
                .ok_or_else(|| CliError::Input(format!("no pool for {}", e.id)))?;
            Ok((e, pool))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let prompts = ctx.prompts()?;
    let backend = ctx.cfg.build_backend()?;
    let seed = out.seed("synthesis");
    let shuffle_seed = out.seed("shuffle");
    let result = synthesize_dataset(
        backend.as_ref(),
        &prompts,
        &items,
        &ctx.cfg.synthesis,
        seed,
        shuffle_seed,
    )
    .map_err(synthesis_err)?;
    info!(
        "kept {} of {} questions",
        result.report.kept, result.report.questions
    );
    let records: Vec<TrainingRecord> = result.instances.iter().map(TrainingRecord::from).collect();
    out.write_jsonl(TRAIN_FILE, &records)?;
    out.write_jsonl(DELTAS_FILE, &delta_samples(&result.constructed))?;
    out.write_json("synthesis_report.json", &result.report)?;
    out.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct FitOutput {
    alpha: f64,
    beta: f64,
    objective: f64,
    positive_ks: Option<f64>,
    negative_ks: Option<f64>,
    samples: usize,
}

pub fn fit_alphabeta(ctx: &Context, input: Option<PathBuf>) -> Result<(), CliError> {
    let mut out = ctx.outputs("fit-alphabeta");
    let path = input.unwrap_or_else(|| ctx.out_dir.join(DELTAS_FILE));
    require_file(&path)?;
    out.input(&path)?;
    let deltas: Vec<DeltaSample> = read_jsonl(&path).map_err(record_err)?;
    let fit = fit_alpha_beta(&deltas).map_err(|e| CliError::Input(e.to_string()))?;
    out.write_json(
        "alphabeta.json",
        &FitOutput {
            alpha: fit.alpha,
            beta: fit.beta,
            objective: fit.objective,
            positive_ks: fit.positive_ks,
            negative_ks: fit.negative_ks,
            samples: deltas.len(),
        },
    )?;
    out.finish()?;
    Ok(())
}

pub fn losscheck(ctx: &Context) -> Result<(), CliError> {
    let mut out = ctx.outputs("losscheck");
    let check_seed = out.seed("losscheck");
    let init_seed = out.seed("toy-init");
    let report = run_loss_checks(check_seed);
    let fixture = parity_fixture(init_seed).map_err(|e| CliError::Invariant(e.to_string()))?;
    out.write_json("losscheck_report.json", &report)?;
    out.write_json("loss_parity_fixture.json", &fixture)?;
    out.finish()?;
    for c in &report.checks {
        info!(
            "{} {}: {}",
            if c.passed { "pass" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        Err(CliError::Invariant(format!(
            "loss checks failed: {}",
            failed.join(", ")
        )))
    }
}

fn csv_bytes(
    f: impl FnOnce(&mut Vec<u8>) -> Result<(), MetricsError>,
) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(metrics_err)?;
    Ok(buf)
}

pub fn evaluate(ctx: &Context, selections: Option<PathBuf>, run_id: &str) -> Result<(), CliError> {
    let mut out = ctx.outputs("evaluate");
    let selections = ctx.selections(selections, &mut out)?;
    let dataset = ctx.dataset(&mut out)?;
    let pools = ctx.pools(&dataset, &mut out)?;
    let prompts = ctx.prompts()?;
    let backend = ctx.cfg.build_backend()?;
    let records = evaluate_run(
        backend.as_ref(),
        &dataset,
        &pools,
        &selections,
        prompts.get(TemplateName::Answer),
        &ctx.cfg.eval,
    )
    .map_err(metrics_err)?;
    let row = aggregate(run_id, &records, ctx.cfg.eval.similarity);
    let per_query = csv_bytes(|w| write_per_query_csv(w, &records))?;
    let agg = csv_bytes(|w| write_aggregate_csv(w, std::slice::from_ref(&row)))?;
    out.write("eval_per_query.csv", &per_query)?;
    out.write("eval_aggregate.csv", &agg)?;
    out.finish()?;
    Ok(())
}

fn novelty_rows(
    selections: &BTreeMap<String, Vec<usize>>,
    pools: &BTreeMap<String, CandidatePool>,
    kind: SimilarityKind,
    backend: Option<&dyn LlmBackend>,
) -> Result<Vec<(String, usize, f64)>, CliError> {
    let mut rows = Vec::new();
    for (id, indices) in selections {
        if indices.is_empty() {
            continue;
        }
        let pool = pools
            .get(id)
            .ok_or_else(|| CliError::Input(format!("no pool for {id}")))?;
        let set = optiset_core::model::EvidenceSet::raw(indices.clone());
        set.validate(pool.len())
            .map_err(|e| CliError::Input(format!("{id}: {e}")))?;
        let v = set_novelty(&pool.select(indices), kind, backend).map_err(metrics_err)?;
        rows.push((id.clone(), indices.len(), v));
    }
    Ok(rows)
}

pub fn novelty(
    ctx: &Context,
    selections: Option<PathBuf>,
    kind: Option<SimilarityKind>,
) -> Result<(), CliError> {
    let mut out = ctx.outputs("novelty");
    let kind = kind.unwrap_or(ctx.cfg.eval.similarity);
    let selections = ctx.selections(selections, &mut out)?;
    let dataset = ctx.dataset(&mut out)?;
    let pools = ctx.pools(&dataset, &mut out)?;
    let backend = match kind {
        SimilarityKind::Jaccard => None,
        SimilarityKind::EmbeddingCosine => Some(ctx.cfg.build_backend()?),
    };
    let rows = novelty_rows(&selections, &pools, kind, backend.as_deref())?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Invariant(e.to_string());
    w.write_record(["query_id", "doc_count", "novelty"])
        .map_err(csv_err)?;
    for (id, n, v) in &rows {
        w.write_record([id.clone(), n.to_string(), v.to_string()])
            .map_err(csv_err)?;
    }
    let per_query = w
        .into_inner()
        .map_err(|e| CliError::Invariant(e.to_string()))?;
    let items: Vec<(f64, usize)> = rows.iter().map(|r| (r.2, r.1)).collect();
    let report = novelty_report(&items);
    let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
    let summary = format!(
        "sim_kind,n_queries,novel_all,novel_2,novel_3\n{kind},{},{},{},{}\n",
        rows.len(),
        fmt(report.novel_all),
        fmt(report.novel_2),
        fmt(report.novel_3)
    );
    out.write("novelty.csv", &per_query)?;
    out.write("novelty_summary.csv", summary.as_bytes())?;
    out.finish()?;
    Ok(())
}
