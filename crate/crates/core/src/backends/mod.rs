//! Uniform interface to generation and scoring models.
//!
//! Two implementations: [`http::HttpBackend`] speaks the OpenAI-compatible
//! chat-completions protocol, [`sim::SimBackend`] replays scripted outputs
//! deterministically for offline runs and tests. Images are opaque payloads;
//! nothing here decodes or resizes them.

pub mod http;
pub mod sim;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Decoding knobs for a generation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub n: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: u32,
    pub max_new_tokens: u32,
    pub repetition_penalty: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            n: 1,
            temperature: 0.7,
            top_p: 0.8,
            top_k: 20,
            max_new_tokens: 16384,
            repetition_penalty: 1.05,
            seed: None,
        }
    }
}

impl SamplingParams {
    pub fn with_n(mut self, n: u32) -> Self {
        self.n = n;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.n < 1 {
            return Err(BackendError::InvalidRequest("n must be >= 1".into()));
        }
        if self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest("temperature must be >= 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(BackendError::InvalidRequest("top_p must be in (0, 1]".into()));
        }
        if self.top_k < 1 {
            return Err(BackendError::InvalidRequest("top_k must be >= 1".into()));
        }
        if self.max_new_tokens < 1 {
            return Err(BackendError::InvalidRequest("max_new_tokens must be >= 1".into()));
        }
        if self.repetition_penalty <= 0.0 {
            return Err(BackendError::InvalidRequest(
                "repetition_penalty must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Opaque image reference passed through to the backend untouched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImagePayload {
    Url { url: String },
    Base64 { media_type: String, data: String },
    Path { path: String },
}

/// A single chat turn: system prompt, user prompt, optional image, decoding
/// parameters, and optionally a set of candidate tokens whose next-token
/// log-probabilities are wanted instead of a completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_text: String,
    pub user_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_payload: Option<ImagePayload>,
    pub sampling: SamplingParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob_request: Option<Vec<String>>,
}

impl ChatRequest {
    pub fn new(system_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        Self {
            system_text: system_text.into(),
            user_text: user_text.into(),
            image_payload: None,
            sampling: SamplingParams::default(),
            logprob_request: None,
        }
    }

    pub fn with_sampling(mut self, sampling: SamplingParams) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn with_image(mut self, image: Option<ImagePayload>) -> Self {
        self.image_payload = image;
        self
    }

    /// Requests next-token probabilities over the given candidate tokens.
    pub fn with_choice_tokens(mut self, tokens: &[&str]) -> Self {
        self.logprob_request = Some(tokens.iter().map(|t| t.to_string()).collect());
        self
    }

    pub(crate) fn validate_choice(&self) -> Result<&[String], BackendError> {
        let Some(tokens) = self.logprob_request.as_deref() else {
            return Err(BackendError::InvalidRequest(
                "choice_probability needs a logprob_request".into(),
            ));
        };
        let mut distinct: Vec<&String> = tokens.iter().collect();
        distinct.sort();
        distinct.dedup();
        if distinct.len() < 2 || tokens.iter().any(|t| t.is_empty()) {
            return Err(BackendError::InvalidRequest(
                "logprob_request needs at least 2 distinct non-empty candidates".into(),
            ));
        }
        Ok(tokens)
    }
}

/// Raw log-probability and renormalized probability for one candidate token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateProbability {
    pub token: String,
    pub logprob: f64,
    pub probability: f64,
}

/// Next-token distribution renormalized over the requested candidate set.
/// Probabilities sum to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceProbabilities {
    pub candidates: Vec<CandidateProbability>,
}

impl ChoiceProbabilities {
    /// Renormalizes raw log-probabilities with the usual max-shift for
    /// stability; for two candidates this is the two-way softmax.
    pub fn from_logprobs(pairs: &[(String, f64)]) -> Self {
        let max = pairs
            .iter()
            .map(|(_, lp)| *lp)
            .fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = pairs.iter().map(|(_, lp)| (lp - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let candidates = pairs
            .iter()
            .zip(&weights)
            .map(|((token, logprob), w)| CandidateProbability {
                token: token.clone(),
                logprob: *logprob,
                probability: w / total,
            })
            .collect();
        Self { candidates }
    }

    /// Builds from already-normalized probabilities (scripted backends).
    pub fn from_probabilities(pairs: &[(String, f64)]) -> Self {
        let total: f64 = pairs.iter().map(|(_, p)| *p).sum();
        let candidates = pairs
            .iter()
            .map(|(token, p)| CandidateProbability {
                token: token.clone(),
                logprob: p.ln(),
                probability: if total > 0.0 { p / total } else { 0.0 },
            })
            .collect();
        Self { candidates }
    }

    pub fn probability_of(&self, token: &str) -> Option<f64> {
        self.candidates
            .iter()
            .find(|c| c.token == token)
            .map(|c| c.probability)
    }

    /// Probability of the `"+"` token, the PRM's step-correctness score.
    pub fn p_plus(&self) -> Option<f64> {
        self.probability_of(PLUS_TOKEN)
    }
}

/// Label tokens the PRM responds with.
pub const PLUS_TOKEN: &str = "+";
pub const MINUS_TOKEN: &str = "-";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend refused request (status {status}): {message}")]
    Refusal { status: u16, message: String },
    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("backend does not return candidate log-probabilities: {0}")]
    LogprobsUnsupported(String),
    #[error("backend omitted requested candidate token {token:?}")]
    CandidateMissing { token: String },
}

impl BackendError {
    /// Budget exhaustion is a clean stop, not a failure of the backend.
    pub fn is_budget(&self) -> bool {
        matches!(self, BackendError::BudgetExceeded(_))
    }
}

/// Request/token caps plus transfer accounting, shared across all backends of
/// a run.
#[derive(Debug, Default)]
pub struct BudgetTracker {
    max_requests: Option<u64>,
    max_tokens: Option<u64>,
    requests: AtomicU64,
    tokens: AtomicU64,
    bytes_sent: AtomicU64,
    bytes_received: AtomicU64,
}

impl BudgetTracker {
    pub fn new(max_requests: Option<u64>, max_tokens: Option<u64>) -> Arc<Self> {
        Arc::new(Self {
            max_requests,
            max_tokens,
            ..Self::default()
        })
    }

    pub fn unlimited() -> Arc<Self> {
        Self::new(None, None)
    }

    /// Reserves one request slot; fails once the cap is reached.
    pub fn charge_request(&self) -> Result<(), BackendError> {
        if let Some(max_tokens) = self.max_tokens {
            if self.tokens.load(Ordering::SeqCst) >= max_tokens {
                return Err(BackendError::BudgetExceeded(format!(
                    "token cap {max_tokens} reached"
                )));
            }
        }
        let prev = self.requests.fetch_add(1, Ordering::SeqCst);
        if let Some(max) = self.max_requests {
            if prev >= max {
                return Err(BackendError::BudgetExceeded(format!(
                    "request cap {max} reached"
                )));
            }
        }
        Ok(())
    }

    pub fn record_transfer(&self, sent: u64, received: u64, tokens: u64) {
        self.bytes_sent.fetch_add(sent, Ordering::SeqCst);
        self.bytes_received.fetch_add(received, Ordering::SeqCst);
        self.tokens.fetch_add(tokens, Ordering::SeqCst);
    }

    pub fn snapshot(&self) -> BudgetSnapshot {
        BudgetSnapshot {
            requests: self.requests.load(Ordering::SeqCst),
            tokens: self.tokens.load(Ordering::SeqCst),
            bytes_sent: self.bytes_sent.load(Ordering::SeqCst),
            bytes_received: self.bytes_received.load(Ordering::SeqCst),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSnapshot {
    pub requests: u64,
    pub tokens: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

/// Rough token count used for budgets when the backend reports no usage.
pub(crate) fn approx_tokens(text: &str) -> u64 {
    (text.len() as u64) / 4 + 1
}

/// A chat model endpoint. Implementations are shareable across tasks and
/// bound their own in-flight concurrency.
#[async_trait]
pub trait Backend: Send + Sync {
    /// Returns exactly `request.sampling.n` completion texts in the backend's
    /// return order.
    async fn generate(&self, request: &ChatRequest) -> Result<Vec<String>, BackendError>;

    /// Next-token log-probabilities for the requested candidate tokens at the
    /// first generated position, renormalized over that set.
    async fn choice_probability(
        &self,
        request: &ChatRequest,
    ) -> Result<ChoiceProbabilities, BackendError>;
}
