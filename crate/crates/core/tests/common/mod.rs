#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

pub mod golden;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use troupe_core::backend::ScriptedBackend;
use troupe_core::clock::SteppedClock;
use troupe_core::config::{load_configs, CompanionConfig};
use troupe_core::{ChatMessage, ChatSession, Engine, SessionSpec};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn fixture_configs() -> Vec<CompanionConfig> {
    load_configs(fixtures().join("companions.json")).expect("fixture config loads")
}

pub fn start_time() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2024, 5, 1)
        .unwrap()
        .and_hms_opt(9, 30, 0)
        .unwrap()
}

pub fn clock() -> Arc<SteppedClock> {
    Arc::new(SteppedClock::new(start_time(), Duration::seconds(1)))
}

pub fn engine(backend: Arc<ScriptedBackend>) -> Arc<Engine> {
    Arc::new(Engine::new(fixture_configs(), backend).expect("fixture engine"))
}

pub fn session(
    engine: &Arc<Engine>,
    situation: &str,
    participants: &[&str],
    seed: u64,
) -> ChatSession {
    let spec = SessionSpec::new(
        "chat-1",
        situation,
        participants.iter().map(|s| s.to_string()).collect(),
    )
    .seed(seed)
    .clock(clock())
    .world(Default::default());
    engine.create_session(spec).expect("session")
}

/// Collects every reply the session emits.
#[derive(Default)]
pub struct Events(pub Vec<ChatMessage>);

impl Events {
    pub fn sink(&mut self) -> impl FnMut(&ChatMessage) + Send + '_ {
        |m| self.0.push(m.clone())
    }

    pub fn senders(&self) -> Vec<&str> {
        self.0.iter().map(|m| m.sender.as_str()).collect()
    }
}
