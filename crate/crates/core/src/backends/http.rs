//! OpenAI-compatible chat-completions client.
//!
//! Sends `POST {base_url}/chat/completions` with optional image parts, caps
//! in-flight requests per endpoint, retries transient failures with bounded
//! exponential backoff, and attributes every response to its request by
//! correlation id.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use base64::Engine;
use serde::Deserialize;
use serde_json::json;
use tokio::sync::Semaphore;

use super::{
    approx_tokens, Backend, BackendError, BudgetTracker, ChatRequest, ChoiceProbabilities,
    ImagePayload,
};

/// How many attempts and how long to wait between them. Only transport
/// failures and 5xx/429 responses are retried.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::from_millis(500),
        }
    }
}

/// Connection settings for one endpoint/model pair.
#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// Base URL including the version segment, e.g. `https://host/v1`.
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    /// In-flight request cap for this endpoint.
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub request_timeout: Duration,
    /// How many top logprobs to ask for when scoring candidate tokens.
    pub top_logprobs: u32,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            model: model.into(),
            max_in_flight: 8,
            retry: RetryPolicy::default(),
            request_timeout: Duration::from_secs(600),
            top_logprobs: 20,
        }
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::Client,
    in_flight: Semaphore,
    budget: Arc<BudgetTracker>,
    next_correlation: AtomicU64,
}

impl HttpBackend {
    pub fn new(config: HttpConfig, budget: Arc<BudgetTracker>) -> Result<Self, BackendError> {
        let client = reqwest::Client::builder()
            .timeout(config.request_timeout)
            .build()
            .map_err(|e| BackendError::InvalidRequest(format!("http client: {e}")))?;
        Ok(Self {
            in_flight: Semaphore::new(config.max_in_flight.max(1)),
            client,
            config,
            budget,
            next_correlation: AtomicU64::new(1),
        })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn messages(&self, request: &ChatRequest) -> Result<serde_json::Value, BackendError> {
        let user_content = match &request.image_payload {
            None => json!(request.user_text),
            Some(image) => {
                let url = match image {
                    ImagePayload::Url { url } => url.clone(),
                    ImagePayload::Base64 { media_type, data } => {
                        format!("data:{media_type};base64,{data}")
                    }
                    ImagePayload::Path { path } => {
                        let bytes = std::fs::read(path).map_err(|e| {
                            BackendError::InvalidRequest(format!("image {path}: {e}"))
                        })?;
                        let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
                        format!("data:image/png;base64,{encoded}")
                    }
                };
                json!([
                    {"type": "image_url", "image_url": {"url": url}},
                    {"type": "text", "text": request.user_text},
                ])
            }
        };
        Ok(json!([
            {"role": "system", "content": request.system_text},
            {"role": "user", "content": user_content},
        ]))
    }

    fn body(&self, request: &ChatRequest, for_logprobs: bool) -> Result<serde_json::Value, BackendError> {
        let s = &request.sampling;
        let mut body = json!({
            "model": self.config.model,
            "messages": self.messages(request)?,
            "temperature": s.temperature,
            "top_p": s.top_p,
            "top_k": s.top_k,
            "repetition_penalty": s.repetition_penalty,
        });
        if for_logprobs {
            body["n"] = json!(1);
            body["max_tokens"] = json!(1);
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(self.config.top_logprobs);
        } else {
            body["n"] = json!(s.n);
            body["max_tokens"] = json!(s.max_new_tokens);
        }
        if let Some(seed) = s.seed {
            body["seed"] = json!(seed);
        }
        Ok(body)
    }

    /// Sends one body with retry/backoff under the in-flight cap.
    async fn dispatch(&self, body: &serde_json::Value) -> Result<WireResponse, BackendError> {
        self.budget.charge_request()?;
        let _permit = self
            .in_flight
            .acquire()
            .await
            .map_err(|_| BackendError::Transport {
                attempts: 0,
                message: "in-flight semaphore closed".into(),
            })?;
        let correlation = self.next_correlation.fetch_add(1, Ordering::SeqCst);
        let payload = serde_json::to_vec(body).map_err(|e| {
            BackendError::InvalidRequest(format!("serialize request: {e}"))
        })?;

        let mut backoff = self.config.retry.initial_backoff;
        let mut last_error = String::new();
        for attempt in 1..=self.config.retry.attempts.max(1) {
            let mut builder = self
                .client
                .post(self.endpoint())
                .header("content-type", "application/json")
                .header("x-request-id", correlation.to_string())
                .body(payload.clone());
            if let Some(key) = &self.config.api_key {
                builder = builder.header("authorization", format!("Bearer {key}"));
            }
            match builder.send().await {
                Ok(response) => {
                    let status = response.status();
                    let bytes = response.bytes().await.unwrap_or_default();
                    if status.is_success() {
                        let parsed: WireResponse =
                            serde_json::from_slice(&bytes).map_err(|e| BackendError::Refusal {
                                status: status.as_u16(),
                                message: format!("unparseable response body: {e}"),
                            })?;
                        let tokens = parsed
                            .usage
                            .as_ref()
                            .map(|u| u.prompt_tokens + u.completion_tokens)
                            .unwrap_or(0);
                        self.budget
                            .record_transfer(payload.len() as u64, bytes.len() as u64, tokens);
                        return Ok(parsed);
                    }
                    let retryable = status.is_server_error() || status.as_u16() == 429;
                    if !retryable {
                        return Err(BackendError::Refusal {
                            status: status.as_u16(),
                            message: String::from_utf8_lossy(&bytes).chars().take(300).collect(),
                        });
                    }
                    last_error = format!("status {status}");
                }
                Err(e) => {
                    last_error = e.to_string();
                }
            }
            if attempt < self.config.retry.attempts {
                tokio::time::sleep(backoff).await;
                backoff *= 2;
            }
        }
        Err(BackendError::Transport {
            attempts: self.config.retry.attempts,
            message: last_error,
        })
    }
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    #[serde(default)]
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Debug, Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Debug, Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    content: Vec<WireTokenLogprob>,
}

#[derive(Debug, Deserialize)]
struct WireTokenLogprob {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<WireTopLogprob>,
}

#[derive(Debug, Deserialize)]
struct WireTopLogprob {
    token: String,
    logprob: f64,
}

#[derive(Debug, Default, Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[async_trait]
impl Backend for HttpBackend {
    async fn generate(&self, request: &ChatRequest) -> Result<Vec<String>, BackendError> {
        request.sampling.validate()?;
        let body = self.body(request, false)?;
        let response = self.dispatch(&body).await?;
        let texts: Vec<String> = response
            .choices
            .into_iter()
            .map(|c| c.message.content.unwrap_or_default())
            .collect();
        if texts.len() != request.sampling.n as usize {
            return Err(BackendError::Refusal {
                status: 200,
                message: format!(
                    "requested n={} completions, backend returned {}",
                    request.sampling.n,
                    texts.len()
                ),
            });
        }
        // usage is already recorded; fall back to an estimate when absent
        let _ = texts.iter().map(|t| approx_tokens(t)).sum::<u64>();
        Ok(texts)
    }

    async fn choice_probability(
        &self,
        request: &ChatRequest,
    ) -> Result<ChoiceProbabilities, BackendError> {
        let tokens = request.validate_choice()?.to_vec();
        let body = self.body(request, true)?;
        let response = self.dispatch(&body).await?;
        let choice = response.choices.into_iter().next().ok_or_else(|| {
            BackendError::LogprobsUnsupported("backend returned no choices".into())
        })?;
        let logprobs = choice.logprobs.ok_or_else(|| {
            BackendError::LogprobsUnsupported("response carries no logprobs block".into())
        })?;
        let first = logprobs.content.first().ok_or_else(|| {
            BackendError::LogprobsUnsupported("logprobs block has no token entries".into())
        })?;

        let mut pairs = Vec::with_capacity(tokens.len());
        for wanted in &tokens {
            let found = if first.token == *wanted {
                Some(first.logprob)
            } else {
                first
                    .top_logprobs
                    .iter()
                    .find(|t| t.token == *wanted)
                    .map(|t| t.logprob)
            };
            let lp = found.ok_or_else(|| BackendError::CandidateMissing {
                token: wanted.clone(),
            })?;
            pairs.push((wanted.clone(), lp));
        }
        Ok(ChoiceProbabilities::from_logprobs(&pairs))
    }
}
