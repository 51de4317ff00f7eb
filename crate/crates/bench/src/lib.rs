//! Fixture loading shared by the benchmarks.

use std::path::PathBuf;
use std::time::Duration;

use chrono::{NaiveDate, NaiveDateTime};
use troupe_core::backend::{FinishReason, Usage};
use troupe_core::chat::{ChatMessage, MessageKind};
use troupe_core::config::{load_configs, CompanionConfig};
use troupe_core::{Backend, BackendError, InferenceResult, Job};

pub fn fixture_configs() -> Vec<CompanionConfig> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/companions.json");
    load_configs(&path).expect("fixture companions load")
}

pub fn config(name: &str) -> CompanionConfig {
    fixture_configs()
        .into_iter()
        .find(|c| c.name == name)
        .expect("fixture companion")
}

pub fn now() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2024, 1, 1)
        .unwrap()
        .and_hms_opt(9, 0, 0)
        .unwrap()
}

pub fn message(sender: &str, body: impl Into<String>) -> ChatMessage {
    ChatMessage {
        sender: sender.into(),
        body: body.into(),
        kind: MessageKind::Message,
        conversation_id: "conv".into(),
        timestamp: now(),
    }
}

/// A `n`-turn exchange between the user and the given companions.
pub fn history(n: usize, speakers: &[&str]) -> Vec<ChatMessage> {
    (0..n)
        .map(|i| {
            let sender = if i % 2 == 0 {
                "User"
            } else {
                speakers[i / 2 % speakers.len()]
            };
            message(
                sender,
                format!("Line {i}: the tide came in and the boats stayed out."),
            )
        })
        .collect()
}

/// `paragraphs` paragraphs of roughly 1,000 characters each.
pub fn document(paragraphs: usize) -> String {
    (0..paragraphs)
        .map(|i| {
            let mut p = format!("Paragraph {i}.");
            while p.len() < 1_000 {
                p.push_str(" The tide came in and the boats stayed out.");
            }
            p
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Answers every job at once with a fixed reply and keeps no history.
#[derive(Debug)]
pub struct Instant(pub &'static str);

#[async_trait::async_trait]
impl Backend for Instant {
    async fn complete(&self, job: &Job) -> Result<InferenceResult, BackendError> {
        Ok(InferenceResult::normalized(
            self.0.to_string(),
            Usage::default(),
            Duration::ZERO,
            FinishReason::Stop,
            &job.model,
            1,
        ))
    }
}
