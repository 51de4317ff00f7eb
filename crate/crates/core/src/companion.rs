//! Runtime behaviour of companions: moods, knowledge unlocking and the
//! reply-function chain.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use async_trait::async_trait;
use chrono::NaiveDateTime;
use rand::Rng;

use crate::backend::{AdminData, Backend, BackendError, Job};
use crate::chat::ChatRecord;
use crate::condition::Condition;
use crate::config::{class, CompanionConfig, CompanionKind, ModelConfig, MoodSpec};
use crate::context::Context;
use crate::deputy::{
    needs_summary_with, scope_accepts, DeputyOutput, DeputyState, InputGate, InstructionReply,
    JobMeta, MapReduceSummariser, SummariseContext, Summariser, SummaryError, TokenEstimator,
    DEFAULT_INSUFFICIENT_INPUT, DEPUTY_TEMPERATURE,
};
use crate::prompter::{PromptInput, Prompter};
use crate::world::WorldState;
use crate::EngineRng;

pub const NEUTRAL: &str = "neutral";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActiveMood {
    Neutral,
    Labelled(String),
}

impl ActiveMood {
    pub fn label(&self) -> &str {
        match self {
            ActiveMood::Neutral => NEUTRAL,
            ActiveMood::Labelled(l) => l,
        }
    }
}

/// Cumulative-interval pick: mood `i` wins iff `roll` lies in
/// `[sum(p_0..p_i), sum(p_0..=p_i))`; past the total it is neutral.
pub fn sample_mood(moods: &[MoodSpec], roll: f64) -> ActiveMood {
    let mut upper = 0.0;
    for m in moods {
        let lower = upper;
        upper += m.probability;
        if roll >= lower && roll < upper {
            return ActiveMood::Labelled(m.label.clone());
        }
    }
    ActiveMood::Neutral
}

fn unlocked<'c>(lines: &'c [crate::config::ConditionalLine], world: &WorldState) -> Vec<&'c str> {
    lines
        .iter()
        .filter(|l| {
            l.condition
                .as_ref()
                .is_none_or(|c: &Condition| c.is_met(world))
        })
        .map(|l| l.line.as_str())
        .collect()
}

/// Knowledge lines whose condition holds, in config order. Type errors lock the line.
pub fn unlocked_knowledge<'c>(config: &'c CompanionConfig, world: &WorldState) -> Vec<&'c str> {
    unlocked(&config.knowledge, world)
}

pub fn unlocked_mottos<'c>(config: &'c CompanionConfig, world: &WorldState) -> Vec<&'c str> {
    unlocked(&config.mottos, world)
}

/// Index of a runtime within its session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RuntimeId(pub usize);

/// Whoever spoke last: the user or one of the session's runtimes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Speaker {
    pub name: String,
    pub runtime: Option<RuntimeId>,
}

impl Speaker {
    pub fn user(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            runtime: None,
        }
    }

    pub fn is_user(&self) -> bool {
        self.runtime.is_none()
    }
}

pub type Predicate = Arc<dyn Fn(&Context, &Speaker) -> Result<bool, String> + Send + Sync>;

#[derive(Clone)]
pub enum ReplyTrigger {
    ActionId(String),
    SenderName(String),
    CompanionIdentity(RuntimeId),
    Predicate(Predicate),
    /// Fires when `p` is smaller than a fresh uniform draw.
    RandomThreshold(f64),
    Always,
}

impl ReplyTrigger {
    pub fn predicate(
        f: impl Fn(&Context, &Speaker) -> Result<bool, String> + Send + Sync + 'static,
    ) -> Self {
        ReplyTrigger::Predicate(Arc::new(f))
    }

    pub fn random_threshold(p: f64) -> Result<Self, String> {
        if (0.0..=1.0).contains(&p) {
            Ok(ReplyTrigger::RandomThreshold(p))
        } else {
            Err(format!("random threshold {p} is outside [0, 1]"))
        }
    }
}

impl fmt::Debug for ReplyTrigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReplyTrigger::ActionId(a) => write!(f, "ActionId({a:?})"),
            ReplyTrigger::SenderName(s) => write!(f, "SenderName({s:?})"),
            ReplyTrigger::CompanionIdentity(id) => write!(f, "CompanionIdentity({})", id.0),
            ReplyTrigger::Predicate(_) => f.write_str("Predicate(..)"),
            ReplyTrigger::RandomThreshold(p) => write!(f, "RandomThreshold({p})"),
            ReplyTrigger::Always => f.write_str("Always"),
        }
    }
}

/// A predicate that fails reads as `false` and leaves a note in `context.error`.
pub fn evaluate_reply_trigger(
    trigger: &ReplyTrigger,
    context: &mut Context,
    last_speaker: &Speaker,
    rng: &mut EngineRng,
) -> bool {
    match trigger {
        ReplyTrigger::ActionId(id) => context.action == *id,
        ReplyTrigger::SenderName(name) => last_speaker.name == *name,
        ReplyTrigger::CompanionIdentity(id) => last_speaker.runtime == Some(*id),
        ReplyTrigger::Predicate(f) => match f(context, last_speaker) {
            Ok(b) => b,
            Err(e) => {
                context.note_error(format!("reply trigger failed: {e}"));
                false
            }
        },
        ReplyTrigger::RandomThreshold(p) => *p < rng.random::<f64>(),
        ReplyTrigger::Always => true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Handled {
    Done,
    Continue,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReplyError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Summary(SummaryError),
    #[error("{0}")]
    Misconfigured(String),
}

/// Shared machinery reply functions may lean on.
#[derive(Debug, Clone)]
pub struct ReplyServices {
    pub summariser: Arc<dyn Summariser>,
    pub estimator: Arc<dyn TokenEstimator>,
    pub insufficient_input_message: String,
}

impl Default for ReplyServices {
    fn default() -> Self {
        let summariser = MapReduceSummariser::default();
        Self {
            estimator: summariser.estimator.clone(),
            summariser: Arc::new(summariser),
            insufficient_input_message: DEFAULT_INSUFFICIENT_INPUT.to_string(),
        }
    }
}

/// What a reply function sees of the session besides its own runtime.
pub struct ReplyEnv<'a> {
    pub last_speaker: &'a Speaker,
    pub world: &'a WorldState,
    pub chat: &'a ChatRecord,
    pub backend: &'a dyn Backend,
    pub prompter: &'a Prompter,
    pub services: &'a ReplyServices,
    pub rng: &'a mut EngineRng,
    pub now: NaiveDateTime,
    pub job_counter: &'a mut u64,
}

impl ReplyEnv<'_> {
    pub fn admin(&mut self, speaker: &str) -> AdminData {
        *self.job_counter += 1;
        AdminData {
            job_id: format!("{}-{}", self.chat.id, self.job_counter),
            chat_id: self.chat.id.clone(),
            speaker_name: speaker.to_string(),
            created_at: self.now,
            attempt: 1,
        }
    }

    pub fn job_meta(&mut self, speaker: &str) -> JobMeta {
        *self.job_counter += 1;
        JobMeta {
            chat_id: self.chat.id.clone(),
            speaker: format!("{speaker}#{}", self.job_counter),
            now: self.now,
        }
    }
}

#[async_trait]
pub trait ReplyFunction: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    /// Edit the context; return `Done` when the companion has finished its turn.
    async fn call(
        &self,
        runtime: &CompanionRuntime,
        ctx: &mut Context,
        env: &mut ReplyEnv<'_>,
    ) -> Result<Handled, ReplyError>;
}

#[derive(Debug, Clone)]
pub struct ReplyEntry {
    pub trigger: ReplyTrigger,
    pub function: Arc<dyn ReplyFunction>,
}

impl ReplyEntry {
    pub fn new(trigger: ReplyTrigger, function: impl ReplyFunction + 'static) -> Self {
        Self {
            trigger,
            function: Arc::new(function),
        }
    }
}

/// The ordinary NPC catch-all: prompt the model with the assembled context and history.
#[derive(Debug)]
pub struct ChatReply;

#[async_trait]
impl ReplyFunction for ChatReply {
    fn name(&self) -> &str {
        "chat"
    }

    async fn call(
        &self,
        runtime: &CompanionRuntime,
        ctx: &mut Context,
        env: &mut ReplyEnv<'_>,
    ) -> Result<Handled, ReplyError> {
        let prompt = env.prompter.assemble(&PromptInput {
            context: ctx,
            world: env.world,
            companion: runtime,
            history: env.chat.messages(),
            situation_id: &env.chat.situation_id,
            now: env.now,
            motto_roll: env.rng.random(),
        });
        let job = Job::new(
            ctx.clone(),
            runtime.model().clone(),
            prompt,
            env.admin(runtime.name()),
        )?;
        let result = env.backend.complete(&job).await?;
        ctx.message = strip_own_name(result.text.trim(), runtime.name()).to_string();
        Ok(Handled::Done)
    }
}

/// Models continuing a `Name: text` history tend to echo the prefix.
fn strip_own_name<'t>(reply: &'t str, name: &str) -> &'t str {
    reply
        .strip_prefix(name)
        .and_then(|r| r.strip_prefix(':'))
        .map(str::trim_start)
        .unwrap_or(reply)
}

/// Builds the reply chain for a `className`.
pub trait CompanionClass: Send + Sync {
    fn reply_chain(
        &self,
        config: &CompanionConfig,
        model: &ModelConfig,
        services: &ReplyServices,
    ) -> Vec<ReplyEntry>;

    fn deputy_output(&self) -> Option<DeputyOutput> {
        None
    }
}

fn summary_entry(model: &ModelConfig, services: &ReplyServices) -> ReplyEntry {
    let model = model.clone();
    let estimator = services.estimator.clone();
    ReplyEntry::new(
        ReplyTrigger::predicate(move |ctx, _| {
            Ok(needs_summary_with(ctx, &model, estimator.as_ref()))
        }),
        SummariseContext,
    )
}

struct UserClass;

impl CompanionClass for UserClass {
    fn reply_chain(
        &self,
        _: &CompanionConfig,
        _: &ModelConfig,
        _: &ReplyServices,
    ) -> Vec<ReplyEntry> {
        Vec::new()
    }
}

struct ChatCompanionClass;

impl CompanionClass for ChatCompanionClass {
    fn reply_chain(
        &self,
        _: &CompanionConfig,
        model: &ModelConfig,
        services: &ReplyServices,
    ) -> Vec<ReplyEntry> {
        vec![
            summary_entry(model, services),
            ReplyEntry::new(ReplyTrigger::Always, ChatReply),
        ]
    }
}

struct DeputyClass(DeputyOutput);

impl CompanionClass for DeputyClass {
    fn reply_chain(
        &self,
        config: &CompanionConfig,
        model: &ModelConfig,
        services: &ReplyServices,
    ) -> Vec<ReplyEntry> {
        let scope = config
            .scope
            .unwrap_or(crate::config::DeputyScope::FullDocument);
        vec![
            ReplyEntry::new(
                ReplyTrigger::predicate(move |ctx, _| Ok(!scope_accepts(scope, ctx.document()))),
                InputGate,
            ),
            summary_entry(model, services),
            ReplyEntry::new(ReplyTrigger::Always, InstructionReply),
        ]
    }

    fn deputy_output(&self) -> Option<DeputyOutput> {
        Some(self.0)
    }
}

#[derive(Clone)]
pub struct ClassRegistry {
    classes: BTreeMap<String, Arc<dyn CompanionClass>>,
}

impl fmt::Debug for ClassRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.classes.keys()).finish()
    }
}

impl Default for ClassRegistry {
    fn default() -> Self {
        let mut r = Self {
            classes: BTreeMap::new(),
        };
        r.register(class::USER, UserClass);
        r.register(class::CHAT_COMPANION, ChatCompanionClass);
        r.register(class::INSTRUCTION_DEPUTY, DeputyClass(DeputyOutput::Host));
        r.register(class::ANSWER_DEPUTY, DeputyClass(DeputyOutput::Answer));
        r.register(class::EXCERPT_DEPUTY, DeputyClass(DeputyOutput::Excerpt));
        r.register(class::QUOTE_DEPUTY, DeputyClass(DeputyOutput::Quote));
        r
    }
}

impl ClassRegistry {
    pub fn register(&mut self, name: impl Into<String>, class: impl CompanionClass + 'static) {
        self.classes.insert(name.into(), Arc::new(class));
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn CompanionClass>> {
        self.classes.get(name)
    }

    /// Registered names that are not built in.
    pub fn custom_names(&self) -> Vec<&str> {
        self.classes
            .keys()
            .map(String::as_str)
            .filter(|n| !class::BUILTIN.contains(n))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RuntimeError {
    #[error("{0}: unknown companion class {1:?}")]
    UnknownClass(String, String),
    #[error("{0}: class {1:?} registers no reply functions")]
    EmptyChain(String, String),
}

/// Model settings after applying the companion's overrides.
pub fn resolve_model(config: &CompanionConfig, defaults: &ModelConfig) -> ModelConfig {
    let mut model = config
        .model_override
        .clone()
        .unwrap_or_else(|| defaults.clone());
    if let Some(t) = config.temperature {
        model.temperature = t;
    } else if config.kind == CompanionKind::Shell && config.model_override.is_none() {
        model.temperature = DEPUTY_TEMPERATURE;
    }
    model
}

#[derive(Debug, Clone)]
pub struct CompanionRuntime {
    id: RuntimeId,
    config: Arc<CompanionConfig>,
    mood: ActiveMood,
    model: ModelConfig,
    deputy: Option<DeputyState>,
    reply_functions: Vec<ReplyEntry>,
}

impl CompanionRuntime {
    /// Instantiate from config, drawing the mood from `rng`.
    pub fn new(
        id: RuntimeId,
        config: Arc<CompanionConfig>,
        defaults: &ModelConfig,
        registry: &ClassRegistry,
        services: &ReplyServices,
        rng: &mut EngineRng,
    ) -> Result<Self, RuntimeError> {
        let class = registry.get(&config.class_name).ok_or_else(|| {
            RuntimeError::UnknownClass(config.name.clone(), config.class_name.clone())
        })?;
        let model = resolve_model(&config, defaults);
        let reply_functions = class.reply_chain(&config, &model, services);
        if reply_functions.is_empty() && config.kind != CompanionKind::User {
            return Err(RuntimeError::EmptyChain(
                config.name.clone(),
                config.class_name.clone(),
            ));
        }
        let deputy = match (config.kind, class.deputy_output()) {
            (CompanionKind::Shell, Some(output)) => Some(DeputyState {
                scope: config
                    .scope
                    .unwrap_or(crate::config::DeputyScope::FullDocument),
                output,
                host_action: None,
            }),
            _ => None,
        };
        let mood = sample_mood(&config.moods, rng.random());
        Ok(Self {
            id,
            config,
            mood,
            model,
            deputy,
            reply_functions,
        })
    }

    /// Build a runtime around a hand-written reply chain.
    pub fn with_chain(
        id: RuntimeId,
        config: CompanionConfig,
        model: ModelConfig,
        chain: Vec<ReplyEntry>,
    ) -> Self {
        Self {
            id,
            config: Arc::new(config),
            mood: ActiveMood::Neutral,
            model,
            deputy: None,
            reply_functions: chain,
        }
    }

    pub fn id(&self) -> RuntimeId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn kind(&self) -> CompanionKind {
        self.config.kind
    }

    pub fn config(&self) -> &CompanionConfig {
        &self.config
    }

    pub fn mood(&self) -> &ActiveMood {
        &self.mood
    }

    pub fn set_mood(&mut self, mood: ActiveMood) {
        self.mood = mood;
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    pub fn deputy(&self) -> Option<&DeputyState> {
        self.deputy.as_ref()
    }

    pub fn deputy_mut(&mut self) -> Option<&mut DeputyState> {
        self.deputy.as_mut()
    }

    pub fn reply_functions(&self) -> &[ReplyEntry] {
        &self.reply_functions
    }

    pub fn speaker(&self) -> Speaker {
        Speaker {
            name: self.config.name.clone(),
            runtime: Some(self.id),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplyOutcome {
    Handled,
    Unhandled,
    Failed,
}

/// Run the reply chain until a function reports `Done`.
pub async fn generate_reply(
    runtime: &CompanionRuntime,
    context: &mut Context,
    env: &mut ReplyEnv<'_>,
) -> ReplyOutcome {
    for entry in &runtime.reply_functions {
        if !evaluate_reply_trigger(&entry.trigger, context, env.last_speaker, env.rng) {
            continue;
        }
        tracing::debug!(
            companion = runtime.name(),
            function = entry.function.name(),
            "reply function"
        );
        match entry.function.call(runtime, context, env).await {
            Ok(Handled::Done) => return ReplyOutcome::Handled,
            Ok(Handled::Continue) => {}
            Err(e) => {
                context.note_error(format!("{}: {e}", runtime.name()));
                return ReplyOutcome::Failed;
            }
        }
    }
    context.note_error("unhandled");
    ReplyOutcome::Unhandled
}
