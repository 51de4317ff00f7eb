//! Inference transport.
//!
//! Everything vendor-specific lives behind [`Backend`]. The engine only ever
//! builds [`Job`]s and reads [`InferenceResult`]s.

mod openai;
mod scripted;

use std::time::Duration;

use async_trait::async_trait;
use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::context::Context;
use crate::prompter::PromptData;

pub use openai::{
    ApiEndpoint, OpenAiBackend, OpenAiSettings, RetryPolicy, Sleeper, TokioSleeper, API_KEY_ENV,
};
pub use scripted::{Matcher, RecordedCall, Script, ScriptEntry, ScriptReply, ScriptedBackend};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AdminData {
    pub job_id: String,
    pub chat_id: String,
    pub speaker_name: String,
    pub created_at: NaiveDateTime,
    pub attempt: u32,
}

/// A packaged inference request.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub context: Context,
    pub model: ModelConfig,
    pub prompt: PromptData,
    pub rendered_prompt: String,
    pub admin: AdminData,
}

impl Job {
    pub fn new(
        context: Context,
        model: ModelConfig,
        prompt: PromptData,
        admin: AdminData,
    ) -> Result<Self, BackendError> {
        let rendered_prompt = crate::prompter::apply_chat_template(&prompt);
        if rendered_prompt.trim().is_empty() {
            return Err(BackendError::InvalidJob("rendered prompt is empty".into()));
        }
        Ok(Self {
            context,
            model,
            prompt,
            rendered_prompt,
            admin,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Usage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InferenceResult {
    pub text: String,
    pub usage: Usage,
    pub latency_ms: u64,
    pub finish_reason: FinishReason,
    /// Transport attempts it took, including the successful one.
    pub attempts: u32,
}

impl InferenceResult {
    /// Build a result, pinning `completion_tokens` to the limit when truncated.
    pub fn normalized(
        text: String,
        mut usage: Usage,
        latency: Duration,
        finish_reason: FinishReason,
        model: &ModelConfig,
        attempts: u32,
    ) -> Self {
        if finish_reason == FinishReason::Length {
            usage.completion_tokens = model.max_tokens;
        }
        Self {
            text,
            usage,
            latency_ms: latency.as_millis() as u64,
            finish_reason,
            attempts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    /// The request was rejected; retrying will not help.
    #[error("backend rejected the request: {0}")]
    Config(String),
    #[error("backend unavailable after {attempts} attempts: {last}")]
    Unavailable { attempts: u32, last: String },
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("no script entry matches the prompt: {0}")]
    ScriptExhausted(String),
    #[error("scripted failure: {0}")]
    Scripted(String),
    #[error("invalid job: {0}")]
    InvalidJob(String),
}

#[async_trait]
pub trait Backend: Send + Sync {
    async fn complete(&self, job: &Job) -> Result<InferenceResult, BackendError>;
}

#[async_trait]
impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    async fn complete(&self, job: &Job) -> Result<InferenceResult, BackendError> {
        (**self).complete(job).await
    }
}

/// Rough token count used for usage figures where the server reports none.
pub(crate) fn approx_tokens(text: &str) -> u32 {
    text.chars().count().div_ceil(4) as u32
}
