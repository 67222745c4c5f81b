//! OpenAI-compatible HTTP backend.
//!
//! `generate` posts to `{base_url}/chat/completions` and reads
//! `choices[0].message.content`. `score_continuation` posts the concatenated
//! context and continuation to `{base_url}/completions` with `echo: true` and
//! reads `choices[0].logprobs.{tokens, token_logprobs, text_offset}`, keeping
//! only the entries that fall inside the continuation. When the server omits
//! `text_offset` the context length in tokens is taken from
//! `{base_url}/tokenize`.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, DecodingParams, InFlightLimit, LlmBackend, TokenLogProbs};

fn default_max_in_flight() -> usize {
    8
}

fn default_timeout_secs() -> u64 {
    120
}

fn default_attempts() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub base_url: String,
    pub model_name: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_attempts")]
    pub attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key: None,
            max_in_flight: default_max_in_flight(),
            timeout_secs: default_timeout_secs(),
            attempts: default_attempts(),
            backoff_ms: default_backoff_ms(),
        }
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
    limit: InFlightLimit,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("base_url", &self.config.base_url)
            .field("model_name", &self.config.model_name)
            .finish()
    }
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let limit = InFlightLimit::new(config.max_in_flight);
        Self {
            config,
            agent,
            limit,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn post_once(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let _permit = self.limit.acquire();
        let mut request = self.agent.post(self.url(path));
        if let Some(key) = &self.config.api_key {
            request = request.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = request.send_json(body).map_err(map_transport)?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(map_transport)?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Status { status, body: text });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::Malformed(e.to_string()))
    }

    /// Posts with exponential backoff on transient failures.
    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let attempts = self.config.attempts.max(1);
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        let mut attempt = 1;
        loop {
            match self.post_once(path, body) {
                Err(e) if e.is_transient() && attempt < attempts => {
                    log::warn!("{path} attempt {attempt}/{attempts} failed: {e}");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn context_token_count(&self, context: &str) -> Result<usize, BackendError> {
        let body = json!({ "model": self.config.model_name, "prompt": context });
        let value = self.post("tokenize", &body).map_err(|e| match e {
            BackendError::Status { status: 404, .. } => BackendError::ScoringUnsupported,
            other => other,
        })?;
        value
            .get("count")
            .and_then(Value::as_u64)
            .map(|c| c as usize)
            .or_else(|| value.get("tokens").and_then(Value::as_array).map(Vec::len))
            .ok_or(BackendError::ScoringUnsupported)
    }
}

fn map_transport(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Timeout(_) => BackendError::Timeout,
        ureq::Error::StatusCode(status) => BackendError::Status {
            status,
            body: String::new(),
        },
        ureq::Error::Json(e) => BackendError::Malformed(e.to_string()),
        other => BackendError::Unreachable(other.to_string()),
    }
}

/// Extracts the continuation's log-probabilities from an echoed completion.
fn continuation_logprobs(
    logprobs: &Value,
    context_chars: usize,
    total_chars: usize,
    context_tokens: Option<usize>,
) -> Result<TokenLogProbs, BackendError> {
    let tokens = logprobs
        .get("tokens")
        .and_then(Value::as_array)
        .ok_or(BackendError::ScoringUnsupported)?;
    let values = logprobs
        .get("token_logprobs")
        .and_then(Value::as_array)
        .ok_or(BackendError::ScoringUnsupported)?;
    if tokens.len() != values.len() {
        return Err(BackendError::Malformed(
            "tokens and token_logprobs differ in length".into(),
        ));
    }
    let offsets = logprobs.get("text_offset").and_then(Value::as_array);
    let mut out_tokens = Vec::new();
    let mut out_logprobs = Vec::new();
    for (i, (token, value)) in tokens.iter().zip(values).enumerate() {
        let token = token.as_str().unwrap_or_default();
        let inside = match (offsets, context_tokens) {
            (Some(offsets), _) => {
                let start = offsets.get(i).and_then(Value::as_u64).unwrap_or(0) as usize;
                let end = start + token.chars().count();
                end > context_chars && start < total_chars
            }
            (None, Some(n)) => i >= n,
            (None, None) => return Err(BackendError::ScoringUnsupported),
        };
        if !inside {
            continue;
        }
        let lp = value.as_f64().ok_or_else(|| {
            BackendError::Malformed(format!("missing logprob for continuation token {i}"))
        })?;
        out_tokens.push(token.to_string());
        out_logprobs.push(lp);
    }
    TokenLogProbs::new(out_tokens, out_logprobs)
}

impl LlmBackend for HttpBackend {
    fn generate(&self, prompt: &str, params: &DecodingParams) -> Result<String, BackendError> {
        if prompt.is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        let body = json!({
            "model": self.config.model_name,
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": params.temperature,
            "max_tokens": params.max_new_tokens,
            "seed": params.seed,
        });
        let value = self.post("chat/completions", &body)?;
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Malformed("missing choices[0].message.content".into()))
    }

    fn score_continuation(
        &self,
        context: &str,
        continuation: &str,
    ) -> Result<TokenLogProbs, BackendError> {
        if continuation.is_empty() {
            return Err(BackendError::EmptyContinuation);
        }
        let full = format!("{context}{continuation}");
        let body = json!({
            "model": self.config.model_name,
            "prompt": full,
            "max_tokens": 1,
            "temperature": 0.0,
            "echo": true,
            "logprobs": 1,
        });
        let value = self.post("completions", &body)?;
        let logprobs = value
            .pointer("/choices/0/logprobs")
            .filter(|v| !v.is_null())
            .ok_or(BackendError::ScoringUnsupported)?;
        let has_offsets = logprobs.get("text_offset").is_some_and(Value::is_array);
        let context_tokens = if has_offsets {
            None
        } else {
            Some(self.context_token_count(context)?)
        };
        let prompt_tokens = value
            .pointer("/usage/prompt_tokens")
            .and_then(Value::as_u64)
            .map(|n| n as usize);
        let mut scored = continuation_logprobs(
            logprobs,
            context.chars().count(),
            full.chars().count(),
            context_tokens,
        )?;
        if let (Some(n), Some(ctx)) = (prompt_tokens, context_tokens) {
            // without offsets, generated tokens after the echoed prompt must be dropped
            let keep = n.saturating_sub(ctx).min(scored.tokens.len());
            scored.tokens.truncate(keep);
            scored.logprobs.truncate(keep);
        }
        if scored.is_empty() {
            return Err(BackendError::Malformed(
                "no continuation tokens in echoed logprobs".into(),
            ));
        }
        Ok(scored)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let body = json!({ "model": self.config.model_name, "input": text });
        let value = self.post("embeddings", &body).map_err(|e| match e {
            BackendError::Status { status: 404, .. } => BackendError::EmbeddingUnsupported,
            other => other,
        })?;
        value
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .map(|v| v.iter().filter_map(Value::as_f64).collect())
            .ok_or(BackendError::EmbeddingUnsupported)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_select_continuation_tokens() {
        let logprobs = json!({
            "tokens": ["Q", ":", " x", "\n", "Paris", " France", "!"],
            "token_logprobs": [null, -1.0, -2.0, -0.5, -0.25, -0.75, -3.0],
            "text_offset": [0, 1, 2, 4, 5, 10, 17],
        });
        let out = continuation_logprobs(&logprobs, 5, 17, None).unwrap();
        assert_eq!(out.tokens, vec!["Paris", " France"]);
        assert_eq!(out.logprobs, vec![-0.25, -0.75]);
    }

    #[test]
    fn token_count_fallback() {
        let logprobs = json!({
            "tokens": ["a", "b", "c"],
            "token_logprobs": [null, -1.0, -2.0],
        });
        let out = continuation_logprobs(&logprobs, 0, 0, Some(2)).unwrap();
        assert_eq!(out.logprobs, vec![-2.0]);
    }

    #[test]
    fn missing_arrays_mean_unsupported() {
        let out = continuation_logprobs(&json!({}), 0, 0, None);
        assert_eq!(out, Err(BackendError::ScoringUnsupported));
    }
}
