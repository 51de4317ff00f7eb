//! Headless scenario replay: user steps, a backend script and optional
//! expectations in one JSON document.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use troupe_core::backend::{Script, ScriptedBackend};
use troupe_core::chat::{JsonlTranscript, TranscriptSink};
use troupe_core::clock::SteppedClock;
use troupe_core::orchestrator::ActionInput;
use troupe_core::{
    ChatMessage, ChatSession, CompanionConfig, Engine, MessageKind, ModerationPolicy, SessionSpec,
    SharedWorld, UserInput, WorldState,
};

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_chat_id")]
    pub chat_id: String,
    #[serde(default)]
    pub situation: String,
    pub participants: Vec<String>,
    #[serde(default)]
    pub policy: ModerationPolicy,
    #[serde(default = "default_start")]
    pub start_time: NaiveDateTime,
    #[serde(default = "default_step")]
    pub step_seconds: i64,
    /// Numeric world entries set before the first step.
    #[serde(default)]
    pub world: BTreeMap<String, f64>,
    #[serde(default)]
    pub backend: Script,
    pub steps: Vec<Step>,
    #[serde(default)]
    pub expect: Option<Expectations>,
}

fn default_chat_id() -> String {
    "scenario".into()
}

fn default_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2024, 1, 1)
        .unwrap()
        .and_hms_opt(9, 0, 0)
        .unwrap()
}

fn default_step() -> i64 {
    1
}

/// Exactly one of `say`, `answer` or `action`.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Step {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub say: Option<String>,
    /// Reply to the pending question.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paragraph: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Expectations {
    /// Senders of all non-user messages, in order.
    #[serde(default)]
    pub speakers: Option<Vec<String>>,
    /// Kinds of all non-user messages, in order.
    #[serde(default)]
    pub kinds: Option<Vec<MessageKind>>,
    #[serde(default)]
    pub message_count: Option<usize>,
    /// Substrings that must each appear in some message body.
    #[serde(default)]
    pub contains: Vec<String>,
    #[serde(default)]
    pub world: BTreeMap<String, f64>,
    #[serde(default)]
    pub allow_errors: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    /// The scenario or its companions cannot run as written.
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Io(String),
    #[error("expectation failed: {0}")]
    Expectation(String),
}

pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ScenarioError::Io(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| ScenarioError::Invalid(format!("{}: {e}", path.display())))
}

/// Final state of a run, written by `run --report`.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Report {
    pub chat_id: String,
    pub messages: usize,
    pub interaction_counts: BTreeMap<String, u64>,
    pub world: serde_json::Value,
    pub errors: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pending_conversation_id: Option<String>,
    pub backend_calls: usize,
}

#[derive(Debug)]
pub struct Outcome {
    /// Every appended message, in order.
    pub events: Vec<ChatMessage>,
    pub report: Report,
}

pub async fn run(
    configs: Vec<CompanionConfig>,
    scenario: &Scenario,
    seed: u64,
    transcript: Option<&Path>,
) -> Result<Outcome, ScenarioError> {
    let backend =
        Arc::new(ScriptedBackend::from_script(&scenario.backend).map_err(ScenarioError::Invalid)?);
    let engine = Arc::new(
        Engine::new(configs, backend.clone()).map_err(|e| ScenarioError::Invalid(e.to_string()))?,
    );
    let mut world = WorldState::new();
    for (k, v) in &scenario.world {
        world
            .set(k.clone(), *v)
            .map_err(|e| ScenarioError::Invalid(format!("world.{k}: {e}")))?;
    }
    let clock = SteppedClock::new(
        scenario.start_time,
        chrono::Duration::seconds(scenario.step_seconds),
    );
    let spec = SessionSpec::new(
        scenario.chat_id.clone(),
        scenario.situation.clone(),
        scenario.participants.clone(),
    )
    .seed(seed)
    .policy(scenario.policy.clone())
    .clock(Arc::new(clock))
    .world(SharedWorld::new(world));
    let mut session = engine
        .create_session(spec)
        .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    if let Some(path) = transcript {
        session.set_sink(Box::new(JsonlTranscript::create(path)));
    }

    let mut events = Vec::new();
    let mut errors = Vec::new();
    for (i, step) in scenario.steps.iter().enumerate() {
        let ctx = {
            let mut emit = |m: &ChatMessage| events.push(m.clone());
            run_step(&mut session, step, &mut emit)
                .await
                .map_err(|m| ScenarioError::Invalid(format!("step {}: {m}", i + 1)))?
        };
        if let Some(e) = ctx {
            errors.push(format!("step {}: {e}", i + 1));
        }
    }
    if let Some(path) = transcript {
        if !path.exists() {
            // nothing ran, still leave a header-only transcript behind
            JsonlTranscript::create(path)
                .persist(session.chat())
                .map_err(|e| ScenarioError::Io(format!("cannot write {}: {e}", path.display())))?;
        }
    }
    let report = Report {
        chat_id: session.chat().id.clone(),
        messages: session.chat().messages().len(),
        interaction_counts: session.chat().interaction_counts().clone(),
        world: session.world().snapshot().to_snapshot(),
        errors,
        pending_conversation_id: session.pending().map(|p| p.context.conversation_id.clone()),
        backend_calls: backend.calls().len(),
    };
    Ok(Outcome { events, report })
}

/// Runs one step; returns the error noted during the exchange, if any.
async fn run_step(
    session: &mut ChatSession,
    step: &Step,
    emit: &mut (dyn FnMut(&ChatMessage) + Send),
) -> Result<Option<String>, String> {
    let ctx = match (&step.say, &step.answer, &step.action) {
        (Some(body), None, None) => {
            let input = UserInput {
                body: body.clone(),
                conversation_id: None,
                text: step.text.clone(),
                paragraph: step.paragraph.clone(),
            };
            session.submit_user_message(input, emit).await
        }
        (None, Some(body), None) => {
            let pending = session
                .pending()
                .ok_or("`answer` given but no question is pending")?;
            let input = UserInput {
                body: body.clone(),
                conversation_id: Some(pending.context.conversation_id.clone()),
                text: step.text.clone(),
                paragraph: step.paragraph.clone(),
            };
            session.submit_user_message(input, emit).await
        }
        (None, None, Some(action)) => {
            let input = ActionInput {
                text: step.text.clone(),
                paragraph: step.paragraph.clone(),
            };
            session.trigger_action(action, input, emit).await
        }
        _ => return Err("a step needs exactly one of `say`, `answer` or `action`".into()),
    };
    ctx.map(|c| c.error).map_err(|e| e.to_string())
}

impl Expectations {
    /// The first expectation that does not hold.
    pub fn check(&self, outcome: &Outcome, user: &str) -> Result<(), String> {
        let replies: Vec<&ChatMessage> =
            outcome.events.iter().filter(|m| m.sender != user).collect();
        if let Some(want) = &self.speakers {
            let got: Vec<&str> = replies.iter().map(|m| m.sender.as_str()).collect();
            if got != *want {
                return Err(format!("speakers: expected {want:?}, got {got:?}"));
            }
        }
        if let Some(want) = &self.kinds {
            let got: Vec<MessageKind> = replies.iter().map(|m| m.kind).collect();
            if got != *want {
                return Err(format!("kinds: expected {want:?}, got {got:?}"));
            }
        }
        if let Some(want) = self.message_count {
            if outcome.report.messages != want {
                return Err(format!(
                    "messageCount: expected {want}, got {}",
                    outcome.report.messages
                ));
            }
        }
        for needle in &self.contains {
            if !outcome
                .events
                .iter()
                .any(|m| m.body.contains(needle.as_str()))
            {
                return Err(format!("contains: no message contains {needle:?}"));
            }
        }
        for (key, want) in &self.world {
            let got = outcome
                .report
                .world
                .get(key)
                .and_then(serde_json::Value::as_f64);
            if got != Some(*want) {
                return Err(format!("world.{key}: expected {want}, got {got:?}"));
            }
        }
        if !self.allow_errors {
            if let Some(e) = outcome.report.errors.first() {
                return Err(format!("unexpected error: {e}"));
            }
        }
        Ok(())
    }
}
