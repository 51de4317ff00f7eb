//! Chat orchestration: sessions, rounds, actions and reply routing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::chat::{ChatMessage, ChatRecord, MessageKind, TranscriptSink};
use crate::clock::{Clock, SystemClock};
use crate::companion::{
    generate_reply, ClassRegistry, CompanionRuntime, ReplyEnv, ReplyOutcome, ReplyServices,
    RuntimeError, RuntimeId, Speaker,
};
use crate::condition::Condition;
use crate::config::{
    validate_config_with, ActionDescription, CompanionConfig, CompanionKind, ModelConfig,
    ValidationError,
};
use crate::context::Context;
use crate::moderator::{ModerationInput, ModerationPolicy, Moderator};
use crate::prompter::Prompter;
use crate::world::{interactions_key, SharedWorld, WorldState};
use crate::EngineRng;

/// Name of the synthesized user when the configs declare none.
pub const DEFAULT_USER: &str = "User";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("invalid companion configuration: {}", list(.0))]
    Validation(Vec<ValidationError>),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("unknown companion {0:?}")]
    UnknownCompanion(String),
    #[error("unknown situation {0:?}")]
    UnknownSituation(String),
    #[error("unknown action {0:?}")]
    UnknownAction(String),
    #[error("action {action:?} is locked until {condition}")]
    ActionLocked {
        action: String,
        condition: Condition,
    },
    #[error("a message needs a non-empty body")]
    EmptyMessage,
}

fn list(errors: &[ValidationError]) -> String {
    errors
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// Uniform in `[4, max(4, participants)]`.
pub fn default_round_count(participants: usize, rng: &mut EngineRng) -> usize {
    if participants <= 4 {
        4
    } else {
        rng.random_range(4..=participants)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutedReply {
    pub kind: MessageKind,
    pub body: String,
}

/// Take the reply out of the context. Precedence: question, quote, excerpt, message.
/// All four fields are cleared either way.
pub fn route_reply(ctx: &mut Context) -> Option<RoutedReply> {
    let candidates = [
        (MessageKind::Question, std::mem::take(&mut ctx.question)),
        (MessageKind::Quote, std::mem::take(&mut ctx.quote)),
        (MessageKind::Excerpt, std::mem::take(&mut ctx.excerpt)),
        (MessageKind::Message, std::mem::take(&mut ctx.message)),
    ];
    let routed = candidates
        .into_iter()
        .find(|(_, body)| !body.trim().is_empty())
        .map(|(kind, body)| RoutedReply { kind, body });
    if routed.is_none() {
        ctx.note_error("the speaker produced no reply");
    }
    routed
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct CompanionCard {
    pub name: String,
    pub description: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bio: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avatar: Option<String>,
    pub kind: CompanionKind,
}

pub struct EngineBuilder {
    configs: Vec<CompanionConfig>,
    registry: ClassRegistry,
    services: ReplyServices,
    prompter: Prompter,
    moderator: Moderator,
    defaults: ModelConfig,
    world: SharedWorld,
}

impl EngineBuilder {
    pub fn registry(mut self, registry: ClassRegistry) -> Self {
        self.registry = registry;
        self
    }

    pub fn services(mut self, services: ReplyServices) -> Self {
        self.services = services;
        self
    }

    pub fn prompter(mut self, prompter: Prompter) -> Self {
        self.prompter = prompter;
        self
    }

    pub fn moderator(mut self, moderator: Moderator) -> Self {
        self.moderator = moderator;
        self
    }

    pub fn model_defaults(mut self, defaults: ModelConfig) -> Self {
        self.defaults = defaults;
        self
    }

    pub fn world(mut self, world: SharedWorld) -> Self {
        self.world = world;
        self
    }

    pub fn build(self, backend: Arc<dyn Backend>) -> Result<Engine, EngineError> {
        let errors = validate_config_with(&self.configs, &self.registry.custom_names());
        if !errors.is_empty() {
            return Err(EngineError::Validation(errors));
        }
        let user_name = self
            .configs
            .iter()
            .find(|c| c.kind == CompanionKind::User)
            .map_or_else(|| DEFAULT_USER.to_string(), |c| c.name.clone());
        Ok(Engine {
            configs: self.configs.into_iter().map(Arc::new).collect(),
            registry: self.registry,
            services: self.services,
            prompter: self.prompter,
            moderator: self.moderator,
            defaults: self.defaults,
            world: self.world,
            backend,
            user_name,
        })
    }
}

/// Validated configs plus the shared machinery every session uses.
pub struct Engine {
    configs: Vec<Arc<CompanionConfig>>,
    registry: ClassRegistry,
    services: ReplyServices,
    prompter: Prompter,
    moderator: Moderator,
    defaults: ModelConfig,
    world: SharedWorld,
    backend: Arc<dyn Backend>,
    user_name: String,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field(
                "companions",
                &self.configs.iter().map(|c| &c.name).collect::<Vec<_>>(),
            )
            .field("user", &self.user_name)
            .finish_non_exhaustive()
    }
}

impl Engine {
    pub fn builder(configs: Vec<CompanionConfig>) -> EngineBuilder {
        EngineBuilder {
            configs,
            registry: ClassRegistry::default(),
            services: ReplyServices::default(),
            prompter: Prompter::default(),
            moderator: Moderator::default(),
            defaults: ModelConfig::default(),
            world: SharedWorld::default(),
        }
    }

    pub fn new(
        configs: Vec<CompanionConfig>,
        backend: Arc<dyn Backend>,
    ) -> Result<Self, EngineError> {
        Self::builder(configs).build(backend)
    }

    pub fn configs(&self) -> impl Iterator<Item = &CompanionConfig> {
        self.configs.iter().map(|c| c.as_ref())
    }

    pub fn config(&self, name: &str) -> Option<&CompanionConfig> {
        self.configs
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.as_ref())
    }

    pub fn user_name(&self) -> &str {
        &self.user_name
    }

    pub fn world(&self) -> &SharedWorld {
        &self.world
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    /// Situation ids any companion has a prompt piece for.
    pub fn situations(&self) -> BTreeSet<&str> {
        self.configs
            .iter()
            .flat_map(|c| c.situations.iter().map(|s| s.id.as_str()))
            .collect()
    }

    /// Public view of the NPCs; shells and the user stay hidden.
    pub fn companion_cards(&self) -> Vec<CompanionCard> {
        self.configs
            .iter()
            .filter(|c| c.kind == CompanionKind::Npc)
            .map(|c| CompanionCard {
                name: c.name.clone(),
                description: c.description.clone(),
                bio: c.bio.clone(),
                avatar: c.avatar.clone(),
                kind: c.kind,
            })
            .collect()
    }

    fn arc_config(&self, name: &str) -> Option<Arc<CompanionConfig>> {
        self.configs.iter().find(|c| c.name == name).cloned()
    }

    /// Set up a chat. Moods are drawn here from the session's seeded RNG.
    pub fn create_session(self: &Arc<Self>, spec: SessionSpec) -> Result<ChatSession, EngineError> {
        if !spec.situation.is_empty() && !self.situations().contains(spec.situation.as_str()) {
            return Err(EngineError::UnknownSituation(spec.situation));
        }
        let mut names: Vec<String> = Vec::new();
        for name in &spec.participants {
            if *name != self.user_name && self.config(name).is_none() {
                return Err(EngineError::UnknownCompanion(name.clone()));
            }
            if !names.contains(name) {
                names.push(name.clone());
            }
        }
        let mut rng = EngineRng::seed_from_u64(spec.seed);
        let chat = ChatRecord::new(spec.chat_id, spec.situation, self.user_name.clone(), names);

        let mut members: Vec<String> = chat.others().map(String::from).collect();
        for name in chat.others() {
            let config = self.config(name).expect("checked above");
            for action in &config.actions {
                if !members.contains(&action.deputy_name) {
                    members.push(action.deputy_name.clone());
                }
            }
        }
        let mut runtimes = Vec::with_capacity(members.len());
        for (i, name) in members.iter().enumerate() {
            let config = self
                .arc_config(name)
                .ok_or_else(|| EngineError::UnknownCompanion(name.clone()))?;
            runtimes.push(CompanionRuntime::new(
                RuntimeId(i + 1),
                config,
                &self.defaults,
                &self.registry,
                &self.services,
                &mut rng,
            )?);
        }
        let mut kinds: BTreeMap<String, CompanionKind> = runtimes
            .iter()
            .map(|r| (r.name().to_string(), r.kind()))
            .collect();
        kinds.insert(self.user_name.clone(), CompanionKind::User);

        Ok(ChatSession {
            engine: Arc::clone(self),
            chat,
            runtimes,
            kinds,
            policy: spec.policy,
            world: spec.world.unwrap_or_else(|| self.world.clone()),
            rng,
            clock: spec.clock,
            pending: None,
            sink: None,
            job_counter: 0,
        })
    }
}

pub struct SessionSpec {
    pub chat_id: String,
    pub situation: String,
    /// Companion names; the user is added automatically.
    pub participants: Vec<String>,
    pub policy: ModerationPolicy,
    pub seed: u64,
    pub clock: Arc<dyn Clock>,
    /// Defaults to the engine's world.
    pub world: Option<SharedWorld>,
}

impl SessionSpec {
    pub fn new(
        chat_id: impl Into<String>,
        situation: impl Into<String>,
        participants: Vec<String>,
    ) -> Self {
        Self {
            chat_id: chat_id.into(),
            situation: situation.into(),
            participants,
            policy: ModerationPolicy::default(),
            seed: 0,
            clock: Arc::new(SystemClock),
            world: None,
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn policy(mut self, policy: ModerationPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn world(mut self, world: SharedWorld) -> Self {
        self.world = Some(world);
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct UserInput {
    pub body: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conversation_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paragraph: Option<String>,
}

impl UserInput {
    pub fn new(body: impl Into<String>) -> Self {
        Self {
            body: body.into(),
            ..Self::default()
        }
    }

    pub fn answering(mut self, conversation_id: impl Into<String>) -> Self {
        self.conversation_id = Some(conversation_id.into());
        self
    }
}

/// Document data supplied with an action.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ActionInput {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paragraph: Option<String>,
}

/// An exchange suspended on a question to the user.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingExchange {
    pub context: Context,
    /// Who picks the exchange back up: the asker and whoever was due after it.
    pub resume_recipients: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ActionStatus {
    #[serde(flatten)]
    pub action: ActionDescription,
    pub unlocked: bool,
}

/// Actions of the given hosts, unlocked against `world`. Shells host nothing.
pub fn action_statuses<'a>(
    hosts: impl IntoIterator<Item = &'a CompanionConfig>,
    world: &WorldState,
) -> Vec<ActionStatus> {
    hosts
        .into_iter()
        .filter(|c| c.kind != CompanionKind::Shell)
        .flat_map(|c| c.actions.iter())
        .map(|a| ActionStatus {
            action: a.clone(),
            unlocked: a.condition.as_ref().is_none_or(|c| c.is_met(world)),
        })
        .collect()
}

pub type OnReply<'a> = dyn FnMut(&ChatMessage) + Send + 'a;

/// One chat and the runtimes taking part in it. Not shared; wrap it in a
/// lock to serve it from several tasks.
pub struct ChatSession {
    engine: Arc<Engine>,
    chat: ChatRecord,
    runtimes: Vec<CompanionRuntime>,
    kinds: BTreeMap<String, CompanionKind>,
    policy: ModerationPolicy,
    world: SharedWorld,
    rng: EngineRng,
    clock: Arc<dyn Clock>,
    pending: Option<PendingExchange>,
    sink: Option<Box<dyn TranscriptSink>>,
    job_counter: u64,
}

impl fmt::Debug for ChatSession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChatSession")
            .field("chat", &self.chat.id)
            .field("pending", &self.pending.is_some())
            .finish_non_exhaustive()
    }
}

impl ChatSession {
    pub fn chat(&self) -> &ChatRecord {
        &self.chat
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    pub fn world(&self) -> &SharedWorld {
        &self.world
    }

    pub fn pending(&self) -> Option<&PendingExchange> {
        self.pending.as_ref()
    }

    pub fn runtimes(&self) -> &[CompanionRuntime] {
        &self.runtimes
    }

    pub fn runtime(&self, name: &str) -> Option<&CompanionRuntime> {
        self.runtimes.iter().find(|r| r.name() == name)
    }

    pub fn policy_mut(&mut self) -> &mut ModerationPolicy {
        &mut self.policy
    }

    /// Persist the transcript through `sink` after every round.
    pub fn set_sink(&mut self, sink: Box<dyn TranscriptSink>) {
        self.sink = Some(sink);
    }

    /// Swap in a previously persisted record, e.g. after a restart.
    /// World counters are not touched; they live in the world snapshot.
    pub fn restore(&mut self, record: ChatRecord) {
        self.chat = record;
    }

    /// Actions hosted by companions in this chat, with their lock state.
    pub fn actions(&self) -> Vec<ActionStatus> {
        let hosts = self
            .chat
            .others()
            .filter_map(|n| self.runtime(n))
            .map(|r| r.config());
        action_statuses(hosts, &self.world.snapshot())
    }

    fn new_conversation_id(&mut self) -> String {
        uuid::Builder::from_random_bytes(self.rng.random())
            .into_uuid()
            .to_string()
    }

    /// Non-shell participants, the user included.
    fn talker_count(&self) -> usize {
        self.chat
            .participants
            .iter()
            .filter(|n| self.kinds.get(n.as_str()) != Some(&CompanionKind::Shell))
            .count()
    }

    fn companion_names_for(&self, speaker: &str) -> String {
        self.chat
            .others()
            .filter(|n| *n != speaker && self.kinds.get(*n) != Some(&CompanionKind::Shell))
            .collect::<Vec<_>>()
            .join(", ")
    }

    fn last_speaker(&self) -> Speaker {
        match self.chat.last_message() {
            Some(m) => Speaker {
                name: m.sender.clone(),
                runtime: self.runtime(&m.sender).map(CompanionRuntime::id),
            },
            None => Speaker::user(self.chat.user()),
        }
    }

    fn persist(&mut self, ctx: &mut Context) {
        if let Some(sink) = self.sink.as_mut() {
            if let Err(e) = sink.persist(&self.chat) {
                ctx.note_error(format!("could not persist the transcript: {e}"));
            }
        }
    }

    fn append(
        &mut self,
        sender: &str,
        kind: MessageKind,
        body: String,
        ctx: &Context,
        on_reply: &mut OnReply<'_>,
    ) {
        let message = ChatMessage {
            sender: sender.to_string(),
            body,
            kind,
            conversation_id: ctx.conversation_id.clone(),
            timestamp: self.clock.now(),
        };
        self.chat.append(message.clone());
        if sender != self.chat.user() {
            if let Err(e) = self
                .world
                .update(|w| w.increment(&interactions_key(sender), 1.0))
            {
                tracing::warn!(sender, error = %e, "interaction counter not updated");
            }
        }
        on_reply(&message);
    }

    /// Post a user message. A matching `conversation_id` resumes the
    /// suspended exchange; anything else starts a fresh one.
    pub async fn submit_user_message(
        &mut self,
        input: UserInput,
        on_reply: &mut OnReply<'_>,
    ) -> Result<Context, EngineError> {
        if input.body.trim().is_empty() {
            return Err(EngineError::EmptyMessage);
        }
        let pending = self.pending.take();
        let resumed = match (pending, input.conversation_id.as_deref()) {
            (Some(p), Some(id)) if p.context.conversation_id == id => Some(p),
            (Some(_), _) => {
                self.end_action();
                None
            }
            _ => None,
        };
        let (mut ctx, rounds) = match resumed {
            Some(p) => {
                let mut ctx = p.context;
                ctx.recipients = p.resume_recipients;
                (ctx, 1)
            }
            None => {
                let id = self.new_conversation_id();
                let rounds = default_round_count(self.talker_count(), &mut self.rng);
                (Context::new(id), rounds)
            }
        };
        ctx.input = input.body.clone();
        if let Some(t) = input.text {
            ctx.text = t;
        }
        if let Some(p) = input.paragraph {
            ctx.paragraph = p;
        }
        let user = self.chat.user().to_string();
        self.append(&user, MessageKind::Message, input.body, &ctx, on_reply);
        Ok(self.run_conversation(ctx, rounds, on_reply).await)
    }

    /// Start the action's deputy-then-host exchange.
    pub async fn trigger_action(
        &mut self,
        action_id: &str,
        input: ActionInput,
        on_reply: &mut OnReply<'_>,
    ) -> Result<Context, EngineError> {
        let status = self
            .actions()
            .into_iter()
            .find(|s| s.action.id == action_id)
            .ok_or_else(|| EngineError::UnknownAction(action_id.to_string()))?;
        let action = status.action;
        if !status.unlocked {
            return Err(EngineError::ActionLocked {
                action: action.id.clone(),
                condition: action
                    .condition
                    .clone()
                    .expect("locked actions have a condition"),
            });
        }
        self.pending = None;
        self.end_action();
        let mut ctx = Context::new(self.new_conversation_id());
        ctx.action = action.id.clone();
        ctx.recipients = vec![action.deputy_name.clone(), action.companion_name.clone()];
        ctx.text = input.text.unwrap_or_default();
        ctx.paragraph = input.paragraph.unwrap_or_default();
        if let Some(state) = self
            .runtimes
            .iter_mut()
            .find(|r| r.name() == action.deputy_name)
            .and_then(CompanionRuntime::deputy_mut)
        {
            state.host_action = Some(action);
        }
        Ok(self.run_conversation(ctx, 1, on_reply).await)
    }

    fn end_action(&mut self) {
        for r in &mut self.runtimes {
            if let Some(state) = r.deputy_mut() {
                state.host_action = None;
            }
        }
    }

    /// Up to `max_rounds` moderated rounds. Stops when the user is selected,
    /// an error is noted or a question suspends the exchange.
    pub async fn run_conversation(
        &mut self,
        mut ctx: Context,
        max_rounds: usize,
        on_reply: &mut OnReply<'_>,
    ) -> Context {
        let engine = Arc::clone(&self.engine);
        for _ in 0..max_rounds {
            let selection = {
                let input = ModerationInput {
                    chat: &self.chat,
                    kinds: &self.kinds,
                    policy: &self.policy,
                    backend: engine.backend.as_ref(),
                    now: self.clock.now(),
                };
                engine
                    .moderator
                    .select_next_speakers(&input, &mut ctx, &mut self.rng)
                    .await
            };
            tracing::debug!(chat = %self.chat.id, rule = ?selection.rule, speakers = ?selection.speakers, "moderated");
            if selection.is_user() {
                break;
            }
            let suspended = self
                .run_chat_round(&mut ctx, &selection.speakers, on_reply)
                .await;
            self.persist(&mut ctx);
            if suspended || ctx.has_error() || selection.yields_to_user {
                break;
            }
        }
        self.persist(&mut ctx);
        if self.pending.is_none() {
            ctx.action.clear();
            self.end_action();
        }
        ctx
    }

    /// Let each speaker reply in turn, routing replies into the chat.
    /// Returns true when a question suspended the exchange.
    pub async fn run_chat_round(
        &mut self,
        ctx: &mut Context,
        speakers: &[String],
        on_reply: &mut OnReply<'_>,
    ) -> bool {
        let engine = Arc::clone(&self.engine);
        for (i, name) in speakers.iter().enumerate() {
            let Some(idx) = self.runtimes.iter().position(|r| r.name() == name) else {
                ctx.note_error(format!("unknown speaker {name:?}"));
                continue;
            };
            ctx.companion_names = self.companion_names_for(name);
            let last_speaker = self.last_speaker();
            let world = self.world.snapshot();
            let now = self.clock.now();
            let outcome = {
                let mut env = ReplyEnv {
                    last_speaker: &last_speaker,
                    world: &world,
                    chat: &self.chat,
                    backend: engine.backend.as_ref(),
                    prompter: &engine.prompter,
                    services: &engine.services,
                    rng: &mut self.rng,
                    now,
                    job_counter: &mut self.job_counter,
                };
                generate_reply(&self.runtimes[idx], ctx, &mut env).await
            };
            if outcome != ReplyOutcome::Handled {
                return false;
            }
            let is_shell = self.runtimes[idx].kind() == CompanionKind::Shell;
            // a deputy that only prepared the host's job posts nothing
            let routed = if is_shell && !ctx.has_upstream() {
                None
            } else {
                route_reply(ctx)
            };
            match routed {
                Some(reply) => {
                    let kind = reply.kind;
                    self.append(name, kind, reply.body, ctx, on_reply);
                    if kind == MessageKind::Question {
                        self.pending = Some(PendingExchange {
                            context: ctx.clone(),
                            resume_recipients: speakers[i..].to_vec(),
                        });
                        return true;
                    }
                }
                None if !is_shell => return false,
                None => {}
            }
            if !is_shell {
                ctx.job.clear();
                ctx.answer.clear();
            }
        }
        false
    }
}
