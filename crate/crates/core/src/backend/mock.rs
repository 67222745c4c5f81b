//! Deterministic offline backend.
//!
//! Generation is answered by the first [`ScriptRule`] whose pattern occurs in
//! the prompt, otherwise by the configured [`Fallback`]. The heuristic
//! fallback understands the built-in expansion, selection, refinement and
//! answer prompts well enough to drive the full pipeline on small fixtures.
//!
//! Scoring maps a hash of `(context digest, token)` into `[-5, -0.1]` unless a
//! fixture table entry or a uniform model overrides it.

use std::collections::{BTreeSet, HashMap};
use std::sync::{LazyLock, Mutex};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{BackendError, DecodingParams, LlmBackend, TokenLogProbs};
use crate::digest::{sha256_hex, stable_u64, unit_interval};
use crate::retrieval::tokenize;

const HASHED_MIN: f64 = -5.0;
const HASHED_MAX: f64 = -0.1;
const SUPPORTED_MIN: f64 = -1.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleMode {
    /// The n-th matching call gets `responses[n]`, the last one repeats.
    #[default]
    Sequential,
    /// Temperature 0 always gets `responses[0]`; otherwise the response is
    /// picked by a hash of prompt and seed.
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub pattern: String,
    pub responses: Vec<String>,
    #[serde(default)]
    pub mode: RuleMode,
}

impl ScriptRule {
    pub fn new(pattern: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            pattern: pattern.into(),
            responses: vec![response.into()],
            mode: RuleMode::Sequential,
        }
    }

    pub fn sequence(pattern: impl Into<String>, responses: Vec<String>) -> Self {
        Self {
            pattern: pattern.into(),
            responses,
            mode: RuleMode::Sequential,
        }
    }

    pub fn sampled(pattern: impl Into<String>, responses: Vec<String>) -> Self {
        Self {
            pattern: pattern.into(),
            responses,
            mode: RuleMode::Sampled,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Unmatched prompts fail with status 404.
    #[default]
    Error,
    /// Unmatched prompts are answered by a lexical heuristic.
    Heuristic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogprobModel {
    /// Hash of (context digest, token) mapped into `[-5, -0.1]`. With
    /// `evidence_bonus`, a continuation that appears verbatim in the context
    /// is confined to `[-1, -0.1]`.
    Hashed {
        #[serde(default)]
        evidence_bonus: bool,
    },
    /// Every token gets `-ln(vocab)`.
    Uniform { vocab: u32 },
}

impl Default for LogprobModel {
    fn default() -> Self {
        LogprobModel::Hashed {
            evidence_bonus: false,
        }
    }
}

/// Fixed log-probability for a token, optionally tied to one context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogprobEntry {
    /// SHA-256 hex of the context, or `*` for any context.
    pub context: String,
    pub token: String,
    pub logprob: f64,
}

fn default_true() -> bool {
    true
}

fn default_embedding_dim() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockConfig {
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub fallback: Fallback,
    #[serde(default)]
    pub logprobs: LogprobModel,
    #[serde(default)]
    pub logprob_table: Vec<LogprobEntry>,
    #[serde(default = "default_true")]
    pub scoring_supported: bool,
    /// Scoring fails with status 500 when the context contains any of these.
    #[serde(default)]
    pub fail_scoring_when: Vec<String>,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            rules: Vec::new(),
            fallback: Fallback::Error,
            logprobs: LogprobModel::default(),
            logprob_table: Vec::new(),
            scoring_supported: true,
            fail_scoring_when: Vec::new(),
            embedding_dim: default_embedding_dim(),
        }
    }
}

#[derive(Debug, Default)]
pub struct MockBackend {
    config: MockConfig,
    table: HashMap<(String, String), f64>,
    calls: Mutex<HashMap<usize, usize>>,
    prompts: Mutex<Vec<String>>,
    scored: Mutex<Vec<String>>,
}

impl MockBackend {
    pub fn new(config: MockConfig) -> Self {
        let table = config
            .logprob_table
            .iter()
            .map(|e| ((e.context.clone(), e.token.clone()), e.logprob))
            .collect();
        Self {
            config,
            table,
            calls: Mutex::new(HashMap::new()),
            prompts: Mutex::new(Vec::new()),
            scored: Mutex::new(Vec::new()),
        }
    }

    pub fn scripted(rules: Vec<ScriptRule>) -> Self {
        Self::new(MockConfig {
            rules,
            ..MockConfig::default()
        })
    }

    pub fn heuristic() -> Self {
        Self::new(MockConfig {
            fallback: Fallback::Heuristic,
            logprobs: LogprobModel::Hashed {
                evidence_bonus: true,
            },
            ..MockConfig::default()
        })
    }

    pub fn uniform(vocab: u32) -> Self {
        Self::new(MockConfig {
            logprobs: LogprobModel::Uniform { vocab },
            ..MockConfig::default()
        })
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    /// Every prompt passed to `generate` so far, in call order.
    pub fn prompts(&self) -> Vec<String> {
        self.prompts
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }

    /// Every context passed to `score_continuation` so far, in call order.
    pub fn scored_contexts(&self) -> Vec<String> {
        self.scored
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }

    /// Splits a continuation into the mock's tokens.
    pub fn tokenize_continuation(text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_string).collect()
    }

    fn scripted_response(&self, prompt: &str, params: &DecodingParams) -> Option<String> {
        let (index, rule) = self
            .config
            .rules
            .iter()
            .enumerate()
            .find(|(_, r)| prompt.contains(&r.pattern) && !r.responses.is_empty())?;
        let pick = match rule.mode {
            RuleMode::Sequential => {
                let mut calls = self.calls.lock().unwrap_or_else(|e| e.into_inner());
                let n = calls.entry(index).or_insert(0);
                let pick = (*n).min(rule.responses.len() - 1);
                *n += 1;
                pick
            }
            RuleMode::Sampled if params.temperature == 0.0 => 0,
            RuleMode::Sampled => {
                let h = stable_u64(&[prompt.as_bytes(), &params.seed.to_le_bytes()]);
                (h % rule.responses.len() as u64) as usize
            }
        };
        Some(rule.responses[pick].clone())
    }

    fn token_logprob(&self, context_digest: &str, token: &str, bonus_hit: bool) -> f64 {
        if let Some(lp) = self
            .table
            .get(&(context_digest.to_string(), token.to_string()))
            .or_else(|| self.table.get(&("*".to_string(), token.to_string())))
        {
            return *lp;
        }
        match self.config.logprobs {
            LogprobModel::Uniform { vocab } => -(vocab.max(1) as f64).ln(),
            LogprobModel::Hashed { evidence_bonus } => {
                let u = unit_interval(stable_u64(&[context_digest.as_bytes(), token.as_bytes()]));
                let lo = if evidence_bonus && bonus_hit {
                    SUPPORTED_MIN
                } else {
                    HASHED_MIN
                };
                HASHED_MAX + (lo - HASHED_MAX) * u
            }
        }
    }
}

impl LlmBackend for MockBackend {
    fn generate(&self, prompt: &str, params: &DecodingParams) -> Result<String, BackendError> {
        if prompt.is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        self.prompts
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(prompt.to_string());
        if let Some(response) = self.scripted_response(prompt, params) {
            return Ok(response);
        }
        match self.config.fallback {
            Fallback::Heuristic => {
                heuristic_response(prompt, params).ok_or_else(|| BackendError::Status {
                    status: 404,
                    body: "mock heuristic does not recognise the prompt".into(),
                })
            }
            Fallback::Error => Err(BackendError::Status {
                status: 404,
                body: "no mock rule matches the prompt".into(),
            }),
        }
    }

    fn score_continuation(
        &self,
        context: &str,
        continuation: &str,
    ) -> Result<TokenLogProbs, BackendError> {
        if continuation.trim().is_empty() {
            return Err(BackendError::EmptyContinuation);
        }
        if !self.config.scoring_supported {
            return Err(BackendError::ScoringUnsupported);
        }
        self.scored
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(context.to_string());
        if self
            .config
            .fail_scoring_when
            .iter()
            .any(|p| context.contains(p.as_str()))
        {
            return Err(BackendError::Status {
                status: 500,
                body: "scripted scoring failure".into(),
            });
        }
        let digest = sha256_hex(context);
        let bonus_hit = context_has_evidence(context)
            && context
                .to_lowercase()
                .contains(continuation.trim().to_lowercase().as_str());
        let tokens = Self::tokenize_continuation(continuation);
        let logprobs = tokens
            .iter()
            .map(|t| self.token_logprob(&digest, t, bonus_hit))
            .collect();
        TokenLogProbs::new(tokens, logprobs)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let dim = self.config.embedding_dim.max(1);
        let mut v = vec![0.0; dim];
        for token in tokenize(text) {
            let h = stable_u64(&[token.as_bytes()]);
            let sign = if h & 1 == 0 { 1.0 } else { -1.0 };
            v[((h >> 1) % dim as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

// ---------------------------------------------------------------------------
// heuristic responder

static PASSAGE_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)^\[(\d+)\] ([^\n]*)\n([^\n]*)").expect("valid regex"));

fn context_has_evidence(context: &str) -> bool {
    PASSAGE_RE.is_match(context)
}

fn line_value<'a>(prompt: &'a str, prefix: &str) -> Option<&'a str> {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(prefix))
        .map(str::trim)
}

fn content_tokens(text: &str) -> BTreeSet<String> {
    const STOP: &[&str] = &[
        "the", "and", "was", "who", "what", "which", "where", "when", "how", "did", "does", "for",
        "from", "with", "that", "this", "are", "its", "his", "her", "their", "same", "both",
        "first", "year", "known", "about", "into", "than", "then", "there", "many",
    ];
    tokenize(text)
        .into_iter()
        .filter(|t| t.len() > 2 && !STOP.contains(&t.as_str()))
        .collect()
}

fn roll(prompt: &str, seed: u64, salt: &str, index: usize) -> f64 {
    unit_interval(stable_u64(&[
        prompt.as_bytes(),
        &seed.to_le_bytes(),
        salt.as_bytes(),
        &(index as u64).to_le_bytes(),
    ]))
}

fn heuristic_response(prompt: &str, params: &DecodingParams) -> Option<String> {
    if prompt.contains("Generate all questions needed") {
        return Some(heuristic_expand(prompt, params));
    }
    if prompt.contains("### Final Selection") {
        return Some(heuristic_select(prompt, params));
    }
    if prompt.contains("Answer the question below concisely") {
        let answer = PASSAGE_RE
            .captures(prompt)
            .map(|c| c[2].trim().to_string())
            .filter(|t| !t.is_empty())
            .unwrap_or_else(|| "unknown".to_string());
        return Some(answer);
    }
    None
}

fn heuristic_expand(prompt: &str, params: &DecodingParams) -> String {
    let question = line_value(prompt, "Search Query:").unwrap_or_default();
    let mut queries = vec![question.to_string()];
    // runs of capitalised words after the first word name the entities
    let words: Vec<&str> = question.split_whitespace().collect();
    let mut entity: Vec<String> = Vec::new();
    let mut entities: Vec<String> = Vec::new();
    for (i, w) in words.iter().enumerate() {
        let clean: String = w.trim_matches(|c: char| !c.is_alphanumeric()).to_string();
        let capital = clean.chars().next().is_some_and(char::is_uppercase);
        if i > 0 && capital {
            entity.push(clean);
        } else if !entity.is_empty() {
            entities.push(entity.join(" "));
            entity.clear();
        }
    }
    if !entity.is_empty() {
        entities.push(entity.join(" "));
    }
    for (i, e) in entities.iter().enumerate() {
        if params.temperature > 0.0 && roll(prompt, params.seed, "expand", i) < 0.2 {
            continue;
        }
        queries.push(format!("What is known about {e}?"));
    }
    format!("### Queries: {}\n", queries.join("\n"))
}

fn heuristic_select(prompt: &str, params: &DecodingParams) -> String {
    let refine = prompt.contains("Exclude a small amount");
    let question = line_value(prompt, "Search Query:").unwrap_or_default();
    let answers: Vec<String> = line_value(prompt, "Answers:")
        .map(|a| {
            a.split("; ")
                .map(|s| s.trim().to_lowercase())
                .filter(|s| !s.is_empty())
                .collect()
        })
        .unwrap_or_default();
    let mut query_text = question.to_string();
    if let Some(start) = prompt.find("Sub-Queries:\n") {
        let rest = &prompt[start + "Sub-Queries:\n".len()..];
        for line in rest.lines() {
            if line.starts_with("Answers:") || line.starts_with("Please follow") {
                break;
            }
            query_text.push(' ');
            query_text.push_str(line);
        }
    }
    let query_tokens = content_tokens(&query_text);

    let mut scored: Vec<(usize, f64)> = Vec::new();
    for cap in PASSAGE_RE.captures_iter(prompt) {
        let Ok(index) = cap[1].parse::<usize>() else {
            continue;
        };
        let body = format!("{} {}", &cap[2], &cap[3]);
        let overlap = content_tokens(&body).intersection(&query_tokens).count() as f64;
        let lower = body.to_lowercase();
        let has_answer = answers.iter().any(|a| lower.contains(a.as_str()));
        scored.push((index, overlap + if has_answer { 3.0 } else { 0.0 }));
    }
    let hot = params.temperature > 0.0;
    let threshold = if refine { 3.0 } else { 2.0 };
    let mut picked: Vec<(usize, f64)> = scored
        .iter()
        .copied()
        .filter(|&(i, s)| {
            let r = roll(prompt, params.seed, "pick", i);
            if s >= threshold {
                !hot || r < 0.85
            } else if s > 0.0 && !refine {
                hot && r < 0.25 * params.temperature.min(2.0)
            } else {
                hot && !refine && r < 0.04 * params.temperature.min(2.0)
            }
        })
        .collect();
    if picked.is_empty() {
        if let Some(best) = scored
            .iter()
            .copied()
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        {
            picked.push(best);
        }
    }
    picked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let brackets: Vec<String> = picked.iter().map(|(i, _)| format!("[{i}]")).collect();
    let step = if refine {
        "Step 1. Checked the passages for irrelevant or repetitive content.\nStep 2. Kept the passages that answer the query.\n"
    } else {
        "Step 1. The query needs the entities it mentions.\nStep 2. Matched passages to each requirement.\nStep 3. Chose the covering passages.\n"
    };
    format!("{step}### Final Selection: {}.\n", brackets.join(" "))
}
