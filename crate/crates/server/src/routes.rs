use std::convert::Infallible;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::Json;
use futures::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::json;
use troupe_core::orchestrator::{ActionInput, CompanionCard};
use troupe_core::{ChatRecord, EngineError, ModerationPolicy, UserInput};

use crate::events::StoredEvent;
use crate::state::{AppState, ChatHandle, CreateChat};

pub type Shared = Arc<AppState>;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": message.into() }),
        }
    }

    fn not_found(what: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {what}"))
    }

    fn busy() -> Self {
        Self::new(StatusCode::CONFLICT, "the companions are still talking")
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        match &e {
            EngineError::ActionLocked { action, condition } => Self {
                status: StatusCode::LOCKED,
                body: json!({
                    "error": e.to_string(),
                    "action": action,
                    "condition": condition,
                    "reason": condition.to_string(),
                }),
            },
            EngineError::UnknownAction(_) => Self::new(StatusCode::NOT_FOUND, e.to_string()),
            EngineError::UnknownCompanion(_)
            | EngineError::UnknownSituation(_)
            | EngineError::EmptyMessage => Self::new(StatusCode::BAD_REQUEST, e.to_string()),
            EngineError::Validation(_) | EngineError::Runtime(_) => {
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

fn chat(state: &AppState, id: &str) -> Result<Arc<ChatHandle>, ApiError> {
    state.chat(id).ok_or_else(|| ApiError::not_found("chat"))
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CreateChatRequest {
    #[serde(default)]
    situation: String,
    participants: Vec<String>,
    #[serde(default)]
    policy: Option<ModerationPolicy>,
    #[serde(default)]
    seed: Option<u64>,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ChatCreated {
    chat_id: String,
}

pub async fn create_chat(
    State(state): State<Shared>,
    Json(req): Json<CreateChatRequest>,
) -> Result<(StatusCode, Json<ChatCreated>), ApiError> {
    let chat_id = state.create_chat(CreateChat {
        situation: req.situation,
        participants: req.participants,
        policy: req.policy,
        seed: req.seed,
    })?;
    tracing::info!(%chat_id, "chat created");
    Ok((StatusCode::CREATED, Json(ChatCreated { chat_id })))
}

pub async fn get_chat(
    State(state): State<Shared>,
    Path(id): Path<String>,
) -> Result<Json<ChatRecord>, ApiError> {
    let chat = chat(&state, &id)?;
    let record = chat.record.read().clone();
    Ok(Json(record))
}

pub async fn companions(State(state): State<Shared>) -> Json<Vec<CompanionCard>> {
    Json(state.engine.companion_cards())
}

pub async fn actions(
    State(state): State<Shared>,
    Path(id): Path<String>,
) -> Result<impl IntoResponse, ApiError> {
    let chat = chat(&state, &id)?;
    let unlocked: Vec<_> = state
        .actions(&chat)
        .into_iter()
        .filter(|a| a.unlocked)
        .map(|a| a.action)
        .collect();
    Ok(Json(unlocked))
}

pub async fn post_message(
    State(state): State<Shared>,
    Path(id): Path<String>,
    Json(input): Json<UserInput>,
) -> Result<StatusCode, ApiError> {
    let chat = chat(&state, &id)?;
    if input.body.trim().is_empty() {
        return Err(EngineError::EmptyMessage.into());
    }
    let mut session = chat
        .session
        .clone()
        .try_lock_owned()
        .map_err(|_| ApiError::busy())?;
    tokio::spawn(async move {
        let result = {
            let events = &chat.events;
            let record = &chat.record;
            let mut emit = |m: &troupe_core::ChatMessage| {
                record.write().append(m.clone());
                events.message(m);
            };
            session.submit_user_message(input, &mut emit).await
        };
        match result {
            Ok(ctx) => state.finish_run(&chat, &session, &ctx),
            Err(e) => chat.events.error(&e.to_string(), ""),
        }
    });
    Ok(StatusCode::ACCEPTED)
}

pub async fn trigger_action(
    State(state): State<Shared>,
    Path((id, action_id)): Path<(String, String)>,
    input: Option<Json<ActionInput>>,
) -> Result<StatusCode, ApiError> {
    let chat = chat(&state, &id)?;
    let input = input.map(|Json(i)| i).unwrap_or_default();
    let status = state
        .actions(&chat)
        .into_iter()
        .find(|a| a.action.id == action_id)
        .ok_or_else(|| ApiError::from(EngineError::UnknownAction(action_id.clone())))?;
    if !status.unlocked {
        return Err(EngineError::ActionLocked {
            action: action_id,
            condition: status
                .action
                .condition
                .expect("locked actions carry a condition"),
        }
        .into());
    }
    let mut session = chat
        .session
        .clone()
        .try_lock_owned()
        .map_err(|_| ApiError::busy())?;
    tokio::spawn(async move {
        let result = {
            let events = &chat.events;
            let record = &chat.record;
            let mut emit = |m: &troupe_core::ChatMessage| {
                record.write().append(m.clone());
                events.message(m);
            };
            session.trigger_action(&action_id, input, &mut emit).await
        };
        match result {
            Ok(ctx) => state.finish_run(&chat, &session, &ctx),
            Err(e) => chat.events.error(&e.to_string(), ""),
        }
    });
    Ok(StatusCode::ACCEPTED)
}

fn to_sse(e: StoredEvent) -> Result<Event, Infallible> {
    Ok(Event::default()
        .id(e.id.to_string())
        .event(e.name)
        .data(e.data))
}

/// Replays retained events newer than `Last-Event-ID` (all of them without
/// the header), then follows live.
pub async fn events(
    State(state): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let chat = chat(&state, &id)?;
    let after = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok())
        .unwrap_or(0);
    let (backlog, rx) = chat.events.subscribe(after);
    let seen = backlog.last().map_or(after, |e| e.id);
    let live = stream::unfold(rx, move |rx| async move {
        loop {
            let e = rx.recv().await;
            if e.id > seen {
                return Some((e, rx));
            }
        }
    });
    let stream = stream::iter(backlog).chain(live).map(to_sse);
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}
