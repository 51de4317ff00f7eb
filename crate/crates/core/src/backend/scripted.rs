//! Deterministic backend driven by a script of `(matcher, reply)` entries.

use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{approx_tokens, Backend, BackendError, FinishReason, InferenceResult, Job, Usage};

#[derive(Debug, Clone)]
pub enum Matcher {
    Any,
    Contains(String),
    Regex(Regex),
}

impl Matcher {
    pub fn contains(s: impl Into<String>) -> Self {
        Matcher::Contains(s.into())
    }

    pub fn regex(pattern: &str) -> Result<Self, regex::Error> {
        Ok(Matcher::Regex(Regex::new(pattern)?))
    }

    pub fn matches(&self, prompt: &str) -> bool {
        match self {
            Matcher::Any => true,
            Matcher::Contains(s) => prompt.contains(s.as_str()),
            Matcher::Regex(r) => r.is_match(prompt),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScriptReply {
    Text {
        text: String,
        finish_reason: FinishReason,
    },
    Fail(String),
}

#[derive(Debug, Clone)]
pub struct ScriptEntry {
    pub matcher: Matcher,
    pub reply: ScriptReply,
    /// Stays in the script after matching.
    pub repeat: bool,
    pub delay: Duration,
}

impl ScriptEntry {
    pub fn new(matcher: Matcher, reply: impl Into<String>) -> Self {
        Self {
            matcher,
            reply: ScriptReply::Text {
                text: reply.into(),
                finish_reason: FinishReason::Stop,
            },
            repeat: false,
            delay: Duration::ZERO,
        }
    }

    pub fn contains(needle: impl Into<String>, reply: impl Into<String>) -> Self {
        Self::new(Matcher::contains(needle), reply)
    }

    pub fn failing(matcher: Matcher, error: impl Into<String>) -> Self {
        Self {
            reply: ScriptReply::Fail(error.into()),
            ..Self::new(matcher, "")
        }
    }

    pub fn repeating(mut self) -> Self {
        self.repeat = true;
        self
    }

    pub fn delayed(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn truncated(mut self) -> Self {
        if let ScriptReply::Text { finish_reason, .. } = &mut self.reply {
            *finish_reason = FinishReason::Length;
        }
        self
    }
}

/// JSON form of a script, as used by scenario files and `serve --backend mock`.
///
/// ```json
/// {"strict": false, "default": "Hmm.", "entries": [
///   {"contains": "next logical speaker", "reply": "Greta"},
///   {"regex": "part \\d of", "reply": "SUM", "repeat": true, "delayMs": 5},
///   {"contains": "boom", "fail": "backend down"}
/// ]}
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Script {
    #[serde(default)]
    pub strict: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<String>,
    #[serde(default)]
    pub entries: Vec<ScriptEntrySpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ScriptEntrySpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regex: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail: Option<String>,
    #[serde(default)]
    pub repeat: bool,
    #[serde(default)]
    pub delay_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finish_reason: Option<FinishReason>,
}

impl ScriptEntrySpec {
    fn build(&self) -> Result<ScriptEntry, String> {
        let matcher = match (&self.contains, &self.regex) {
            (Some(_), Some(_)) => {
                return Err("an entry takes `contains` or `regex`, not both".into())
            }
            (Some(s), None) => Matcher::Contains(s.clone()),
            (None, Some(r)) => Matcher::regex(r).map_err(|e| format!("bad regex {r:?}: {e}"))?,
            (None, None) => Matcher::Any,
        };
        let reply = match (&self.reply, &self.fail) {
            (Some(_), Some(_)) => return Err("an entry takes `reply` or `fail`, not both".into()),
            (Some(text), None) => ScriptReply::Text {
                text: text.clone(),
                finish_reason: self.finish_reason.unwrap_or(FinishReason::Stop),
            },
            (None, Some(err)) => ScriptReply::Fail(err.clone()),
            (None, None) => return Err("an entry needs `reply` or `fail`".into()),
        };
        Ok(ScriptEntry {
            matcher,
            reply,
            repeat: self.repeat,
            delay: Duration::from_millis(self.delay_ms),
        })
    }
}

/// One `complete` call as the backend saw it.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedCall {
    pub rendered_prompt: String,
    pub speaker: String,
    pub model_id: String,
    pub temperature: f64,
}

#[derive(Debug)]
pub struct ScriptedBackend {
    entries: Mutex<Vec<ScriptEntry>>,
    default: Option<String>,
    strict: bool,
    calls: Mutex<Vec<RecordedCall>>,
}

impl ScriptedBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        Self {
            entries: Mutex::new(entries),
            default: None,
            strict: false,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn from_script(script: &Script) -> Result<Self, String> {
        let entries = script
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| e.build().map_err(|m| format!("script entry #{i}: {m}")))
            .collect::<Result<Vec<_>, _>>()?;
        let mut backend = Self::new(entries);
        backend.default = script.default.clone();
        backend.strict = script.strict;
        Ok(backend)
    }

    /// Reply with `text` whenever nothing matches (ignored in strict mode).
    pub fn with_default(mut self, text: impl Into<String>) -> Self {
        self.default = Some(text.into());
        self
    }

    pub fn strict(mut self) -> Self {
        self.strict = true;
        self
    }

    pub fn push(&self, entry: ScriptEntry) {
        self.entries.lock().push(entry);
    }

    pub fn calls(&self) -> Vec<RecordedCall> {
        self.calls.lock().clone()
    }

    pub fn prompts(&self) -> Vec<String> {
        self.calls
            .lock()
            .iter()
            .map(|c| c.rendered_prompt.clone())
            .collect()
    }

    pub fn remaining(&self) -> usize {
        self.entries.lock().len()
    }
}

#[async_trait]
impl Backend for ScriptedBackend {
    async fn complete(&self, job: &Job) -> Result<InferenceResult, BackendError> {
        self.calls.lock().push(RecordedCall {
            rendered_prompt: job.rendered_prompt.clone(),
            speaker: job.admin.speaker_name.clone(),
            model_id: job.model.model_id.clone(),
            temperature: job.model.temperature,
        });
        let picked = {
            let mut entries = self.entries.lock();
            match entries
                .iter()
                .position(|e| e.matcher.matches(&job.rendered_prompt))
            {
                Some(i) if entries[i].repeat => Some(entries[i].clone()),
                Some(i) => Some(entries.remove(i)),
                None => None,
            }
        };
        let (reply, delay) = match picked {
            Some(entry) => (entry.reply, entry.delay),
            None => match (&self.default, self.strict) {
                (Some(text), false) => (
                    ScriptReply::Text {
                        text: text.clone(),
                        finish_reason: FinishReason::Stop,
                    },
                    Duration::ZERO,
                ),
                _ => {
                    let head: String = job.rendered_prompt.chars().take(120).collect();
                    return Err(BackendError::ScriptExhausted(head));
                }
            },
        };
        if !delay.is_zero() {
            tokio::time::sleep(delay).await;
        }
        match reply {
            ScriptReply::Fail(err) => Err(BackendError::Scripted(err)),
            ScriptReply::Text {
                text,
                finish_reason,
            } => {
                let usage = Usage {
                    prompt_tokens: approx_tokens(&job.rendered_prompt),
                    completion_tokens: approx_tokens(&text),
                };
                Ok(InferenceResult::normalized(
                    text,
                    usage,
                    delay,
                    finish_reason,
                    &job.model,
                    1,
                ))
            }
        }
    }
}
