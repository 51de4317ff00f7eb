//! Client for OpenAI-compatible completion servers.

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;

use super::{approx_tokens, Backend, BackendError, FinishReason, InferenceResult, Job, Usage};
use crate::prompter::Role;

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "ENGINE_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApiEndpoint {
    /// `/chat/completions` with role/content messages.
    #[default]
    Chat,
    /// `/completions` with the locally rendered prompt string.
    Completions,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
            factor: 2,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1`, for `attempt >= 1`.
    pub fn delay_after(&self, attempt: u32) -> Duration {
        self.base_delay * self.factor.saturating_pow(attempt.saturating_sub(1))
    }
}

#[async_trait]
pub trait Sleeper: Send + Sync {
    async fn sleep(&self, duration: Duration);
}

#[derive(Debug, Default)]
pub struct TokioSleeper;

#[async_trait]
impl Sleeper for TokioSleeper {
    async fn sleep(&self, duration: Duration) {
        tokio::time::sleep(duration).await;
    }
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct OpenAiSettings {
    pub base_url: String,
    #[serde(default)]
    pub endpoint: ApiEndpoint,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(skip)]
    pub api_key: Option<String>,
}

fn default_timeout_secs() -> u64 {
    60
}

fn default_concurrency() -> usize {
    4
}

impl OpenAiSettings {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            endpoint: ApiEndpoint::default(),
            timeout_secs: default_timeout_secs(),
            max_concurrency: default_concurrency(),
            api_key: None,
        }
    }
}

impl fmt::Debug for OpenAiSettings {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OpenAiSettings")
            .field("base_url", &self.base_url)
            .field("endpoint", &self.endpoint)
            .field("timeout_secs", &self.timeout_secs)
            .field("max_concurrency", &self.max_concurrency)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

pub struct OpenAiBackend {
    http: reqwest::Client,
    settings: OpenAiSettings,
    retry: RetryPolicy,
    sleeper: Arc<dyn Sleeper>,
    permits: Arc<Semaphore>,
}

impl fmt::Debug for OpenAiBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OpenAiBackend")
            .field("settings", &self.settings)
            .field("retry", &self.retry)
            .finish_non_exhaustive()
    }
}

enum Failure {
    Transient(String),
    Fatal(BackendError),
}

impl OpenAiBackend {
    pub fn new(settings: OpenAiSettings) -> Result<Self, BackendError> {
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(settings.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(format!("cannot build HTTP client: {e}")))?;
        let permits = Arc::new(Semaphore::new(settings.max_concurrency.max(1)));
        Ok(Self {
            http,
            settings,
            retry: RetryPolicy::default(),
            sleeper: Arc::new(TokioSleeper),
            permits,
        })
    }

    /// Like [`OpenAiBackend::new`], taking the key from [`API_KEY_ENV`].
    pub fn from_env(mut settings: OpenAiSettings) -> Result<Self, BackendError> {
        match std::env::var(API_KEY_ENV) {
            Ok(key) if !key.is_empty() => settings.api_key = Some(key),
            _ => return Err(BackendError::Config(format!("{API_KEY_ENV} is not set"))),
        }
        Self::new(settings)
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_sleeper(mut self, sleeper: Arc<dyn Sleeper>) -> Self {
        self.sleeper = sleeper;
        self
    }

    fn url(&self) -> String {
        let base = self.settings.base_url.trim_end_matches('/');
        match self.settings.endpoint {
            ApiEndpoint::Chat => format!("{base}/chat/completions"),
            ApiEndpoint::Completions => format!("{base}/completions"),
        }
    }

    fn body(&self, job: &Job) -> serde_json::Value {
        let model = &job.model;
        let mut body = json!({
            "model": model.model_id,
            "temperature": model.temperature,
            "max_tokens": model.max_tokens,
            "stream": false,
        });
        match self.settings.endpoint {
            ApiEndpoint::Chat => {
                let mut messages = Vec::with_capacity(job.prompt.turns.len() + 1);
                if !job.prompt.system_prompt.is_empty() {
                    messages.push(json!({"role": "system", "content": job.prompt.system_prompt}));
                }
                for t in &job.prompt.turns {
                    let role = match t.role {
                        Role::System => "system",
                        Role::User => "user",
                        Role::Assistant => "assistant",
                    };
                    messages.push(json!({"role": role, "content": t.content}));
                }
                body["messages"] = messages.into();
            }
            ApiEndpoint::Completions => body["prompt"] = job.rendered_prompt.clone().into(),
        }
        if !model.stop_sequences.is_empty() {
            body["stop"] = json!(model.stop_sequences);
        }
        body
    }

    async fn attempt(
        &self,
        job: &Job,
        body: &serde_json::Value,
    ) -> Result<(String, Usage, FinishReason), Failure> {
        let mut request = self.http.post(self.url()).json(body);
        if let Some(key) = &self.settings.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .await
            .map_err(|e| Failure::Transient(describe(&e)))?;
        let status = response.status();
        let text = response
            .text()
            .await
            .map_err(|e| Failure::Transient(describe(&e)))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Failure::Transient(format!(
                "HTTP {status}: {}",
                error_message(&text)
            )));
        }
        if !status.is_success() {
            return Err(Failure::Fatal(BackendError::Config(format!(
                "HTTP {status}: {}",
                error_message(&text)
            ))));
        }
        parse_response(&text, job).map_err(Failure::Fatal)
    }
}

#[async_trait]
impl Backend for OpenAiBackend {
    async fn complete(&self, job: &Job) -> Result<InferenceResult, BackendError> {
        let _permit = self
            .permits
            .acquire()
            .await
            .map_err(|_| BackendError::Unavailable {
                attempts: 0,
                last: "backend shut down".into(),
            })?;
        let body = self.body(job);
        let started = Instant::now();
        let max = self.retry.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match self.attempt(job, &body).await {
                Ok((text, usage, finish)) => {
                    return Ok(InferenceResult::normalized(
                        text,
                        usage,
                        started.elapsed(),
                        finish,
                        &job.model,
                        attempt,
                    ))
                }
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Transient(last)) => {
                    tracing::warn!(job = %job.admin.job_id, attempt, %last, "transient backend failure");
                    if attempt >= max {
                        return Err(BackendError::Unavailable {
                            attempts: attempt,
                            last,
                        });
                    }
                    self.sleeper.sleep(self.retry.delay_after(attempt)).await;
                    attempt += 1;
                }
            }
        }
    }
}

fn describe(e: &reqwest::Error) -> String {
    if e.is_timeout() {
        "request timed out".into()
    } else if e.is_connect() {
        format!("connection failed: {e}")
    } else {
        e.to_string()
    }
}

fn error_message(body: &str) -> String {
    #[derive(Deserialize)]
    struct Envelope {
        error: Detail,
    }
    #[derive(Deserialize)]
    struct Detail {
        message: String,
    }
    match serde_json::from_str::<Envelope>(body) {
        Ok(env) => env.error.message,
        Err(_) => body.chars().take(200).collect(),
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct Choice {
    #[serde(default)]
    message: Option<WireMessage>,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u32,
    #[serde(default)]
    completion_tokens: u32,
}

fn parse_response(body: &str, job: &Job) -> Result<(String, Usage, FinishReason), BackendError> {
    let parsed: CompletionResponse =
        serde_json::from_str(body).map_err(|e| BackendError::Protocol(format!("{e}")))?;
    let choice = parsed
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
    let text = choice
        .message
        .and_then(|m| m.content)
        .or(choice.text)
        .ok_or_else(|| BackendError::Protocol("choice carries no content".into()))?;
    let finish = match choice.finish_reason.as_deref() {
        None | Some("stop") | Some("eos") | Some("stop_sequence") => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        Some(_) => FinishReason::Error,
    };
    let usage = match parsed.usage {
        Some(u) => Usage {
            prompt_tokens: u.prompt_tokens,
            completion_tokens: u.completion_tokens,
        },
        None => Usage {
            prompt_tokens: approx_tokens(&job.rendered_prompt),
            completion_tokens: approx_tokens(&text),
        },
    };
    Ok((text, usage, finish))
}
