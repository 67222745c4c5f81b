//! Text generation and teacher-forced scoring behind one trait.
//!
//! [`MockBackend`] is deterministic and runs offline; [`HttpBackend`] talks to
//! an OpenAI-compatible inference server (enabled by the `http` feature).

use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[cfg(feature = "http")]
mod http;
mod mock;

#[cfg(feature = "http")]
pub use http::{HttpBackend, HttpConfig};
pub use mock::{
    Fallback, LogprobEntry, LogprobModel, MockBackend, MockConfig, RuleMode, ScriptRule,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("continuation is empty")]
    EmptyContinuation,
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("backend returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("backend request timed out")]
    Timeout,
    #[error("backend cannot return prompt log-probabilities")]
    ScoringUnsupported,
    #[error("backend cannot produce embeddings")]
    EmbeddingUnsupported,
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("invalid log-probabilities: {0}")]
    InvalidLogprobs(String),
}

impl BackendError {
    /// Errors worth retrying with backoff.
    pub fn is_transient(&self) -> bool {
        match self {
            BackendError::Unreachable(_) | BackendError::Timeout => true,
            BackendError::Status { status, .. } => matches!(status, 429 | 502 | 503 | 504),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub max_new_tokens: u32,
    /// Only the mock backend and servers that accept a seed use this.
    #[serde(default)]
    pub seed: u64,
}

impl DecodingParams {
    /// Sampling defaults used during data synthesis.
    pub fn sampling() -> Self {
        Self {
            temperature: 1.0,
            max_new_tokens: 1024,
            seed: 0,
        }
    }

    /// Greedy decoding used for answering.
    pub fn greedy() -> Self {
        Self {
            temperature: 0.0,
            max_new_tokens: 64,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self::sampling()
    }
}

/// Per-token natural-log probabilities of a continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbs {
    pub tokens: Vec<String>,
    pub logprobs: Vec<f64>,
}

impl TokenLogProbs {
    pub fn new(tokens: Vec<String>, logprobs: Vec<f64>) -> Result<Self, BackendError> {
        if tokens.len() != logprobs.len() {
            return Err(BackendError::InvalidLogprobs(format!(
                "{} tokens but {} logprobs",
                tokens.len(),
                logprobs.len()
            )));
        }
        if let Some(bad) = logprobs.iter().find(|lp| !lp.is_finite() || **lp > 0.0) {
            return Err(BackendError::InvalidLogprobs(format!(
                "logprob {bad} is not a finite value <= 0"
            )));
        }
        Ok(Self { tokens, logprobs })
    }

    pub fn len(&self) -> usize {
        self.logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logprobs.is_empty()
    }

    pub fn mean(&self) -> Option<f64> {
        if self.logprobs.is_empty() {
            None
        } else {
            Some(self.logprobs.iter().sum::<f64>() / self.logprobs.len() as f64)
        }
    }
}

pub trait LlmBackend: Send + Sync {
    /// Generates a completion for `prompt`, returned verbatim.
    fn generate(&self, prompt: &str, params: &DecodingParams) -> Result<String, BackendError>;

    /// Teacher-forced log-probabilities of `continuation` given `context`.
    fn score_continuation(
        &self,
        context: &str,
        continuation: &str,
    ) -> Result<TokenLogProbs, BackendError>;

    fn embed(&self, _text: &str) -> Result<Vec<f64>, BackendError> {
        Err(BackendError::EmbeddingUnsupported)
    }
}

impl<T: LlmBackend + ?Sized> LlmBackend for &T {
    fn generate(&self, prompt: &str, params: &DecodingParams) -> Result<String, BackendError> {
        (**self).generate(prompt, params)
    }

    fn score_continuation(
        &self,
        context: &str,
        continuation: &str,
    ) -> Result<TokenLogProbs, BackendError> {
        (**self).score_continuation(context, continuation)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        (**self).embed(text)
    }
}

impl<T: LlmBackend + ?Sized> LlmBackend for Box<T> {
    fn generate(&self, prompt: &str, params: &DecodingParams) -> Result<String, BackendError> {
        (**self).generate(prompt, params)
    }

    fn score_continuation(
        &self,
        context: &str,
        continuation: &str,
    ) -> Result<TokenLogProbs, BackendError> {
        (**self).score_continuation(context, continuation)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        (**self).embed(text)
    }
}

/// Counting semaphore bounding concurrent in-flight requests.
#[derive(Debug)]
pub struct InFlightLimit {
    available: Mutex<usize>,
    freed: Condvar,
}

impl InFlightLimit {
    pub fn new(limit: usize) -> Self {
        Self {
            available: Mutex::new(limit.max(1)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InFlightPermit<'_> {
        let mut available = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *available == 0 {
            available = self
                .freed
                .wait(available)
                .unwrap_or_else(|e| e.into_inner());
        }
        *available -= 1;
        InFlightPermit { limit: self }
    }
}

pub struct InFlightPermit<'a> {
    limit: &'a InFlightLimit,
}

impl Drop for InFlightPermit<'_> {
    fn drop(&mut self) {
        let mut available = self
            .limit
            .available
            .lock()
            .unwrap_or_else(|e| e.into_inner());
        *available += 1;
        self.limit.freed.notify_one();
    }
}
