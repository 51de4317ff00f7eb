//! HTTP facade over the engine. Replies stream to clients as server-sent
//! events; every route speaks JSON.
//!
//! | route | |
//! |---|---|
//! | `POST /api/chats` | create a chat, 201 `{chatId}` |
//! | `GET /api/chats/{id}` | the chat record |
//! | `POST /api/chats/{id}/messages` | post a user message, 202 |
//! | `GET /api/chats/{id}/events` | event stream |
//! | `GET /api/chats/{id}/actions` | unlocked actions |
//! | `POST /api/chats/{id}/actions/{actionId}` | trigger an action, 202 |
//! | `GET /api/companions` | public companion cards |

pub mod events;
mod routes;
pub mod state;

use std::sync::Arc;

use axum::http::HeaderValue;
use axum::routing::{get, post};
use axum::Router;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub use events::{EventLog, StoredEvent, EVENT_BUFFER};
pub use state::{AppState, ServerOptions};

pub fn router(state: Arc<AppState>) -> Router {
    let origin = match &state.options.cors_origin {
        Some(o) => match HeaderValue::from_str(o) {
            Ok(v) => AllowOrigin::exact(v),
            Err(_) => {
                tracing::warn!(origin = %o, "invalid CORS origin; allowing any");
                AllowOrigin::any()
            }
        },
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods(Any)
        .allow_headers(Any);
    Router::new()
        .route("/api/chats", post(routes::create_chat))
        .route("/api/chats/{id}", get(routes::get_chat))
        .route("/api/chats/{id}/messages", post(routes::post_message))
        .route("/api/chats/{id}/events", get(routes::events))
        .route("/api/chats/{id}/actions", get(routes::actions))
        .route(
            "/api/chats/{id}/actions/{action_id}",
            post(routes::trigger_action),
        )
        .route("/api/companions", get(routes::companions))
        .layer(cors)
        .with_state(state)
}

/// Serve until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
