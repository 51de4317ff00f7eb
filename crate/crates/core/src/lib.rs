//! Orchestration engine for narrative multi-companion chats over language models.
//!
//! Companions are configured in JSON ([`config`]), brought to life per chat
//! ([`companion`]), prompted through [`prompter`], picked by the
//! [`moderator`] and driven round by round in [`orchestrator`]. Shell
//! companions ([`deputy`]) carry out actions on behalf of a host. All model
//! traffic goes through a [`backend::Backend`].

pub mod backend;
pub mod chat;
pub mod clock;
pub mod companion;
pub mod condition;
pub mod config;
pub mod context;
pub mod deputy;
pub mod moderator;
pub mod orchestrator;
pub mod prompter;
pub mod world;

/// The RNG behind every random choice the engine makes.
pub type EngineRng = rand_chacha::ChaCha8Rng;

pub use backend::{Backend, BackendError, InferenceResult, Job};
pub use chat::{ChatMessage, ChatRecord, MessageKind};
pub use companion::{CompanionRuntime, ReplyTrigger};
pub use condition::{evaluate_condition, Comparator, Condition};
pub use config::{validate_config, CompanionConfig, CompanionKind, ModelConfig};
pub use context::Context;
pub use moderator::{ModerationPolicy, SelectionMode};
pub use orchestrator::{ChatSession, Engine, EngineError, SessionSpec, UserInput};
pub use world::{SharedWorld, WorldState};
