//! Prompt assembly and chat-format rendering.
//!
//! Assembly is a pure function of its [`PromptInput`]. The system prompt is
//! built from fixed slots in this order:
//!
//! base prompt (or persona), mood, situation, unlocked knowledge, one motto,
//! other companions, decorated user data, job, date and time, epilogue.
//!
//! Rendering into ChatML or Mistral-instruct text happens afterwards in
//! [`apply_chat_template`].

use std::collections::BTreeMap;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::chat::ChatMessage;
use crate::companion::{unlocked_knowledge, unlocked_mottos, CompanionRuntime};
use crate::config::PromptFormat;
use crate::context::Context;
use crate::world::WorldState;

pub const DATA_PLACEHOLDER: &str = "{{DATA}}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTurn {
    pub role: Role,
    pub content: String,
}

impl PromptTurn {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PromptData {
    pub system_prompt: String,
    pub turns: Vec<PromptTurn>,
    pub format: PromptFormat,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("decorator `{tag}` must contain {DATA_PLACEHOLDER} exactly once (found {found})")]
    Placeholder { tag: String, found: usize },
    #[error("decorator tag must not be empty")]
    EmptyTag,
    #[error("unknown decorator slot `{0}`")]
    UnknownSlot(String),
}

/// A replacement template labelling a block of data, e.g. `USER TEXT="{{DATA}}"`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decorator {
    tag: String,
    template: String,
}

impl Decorator {
    pub fn new(tag: impl Into<String>, template: impl Into<String>) -> Result<Self, PromptError> {
        let tag = tag.into();
        let template = template.into();
        if tag.trim().is_empty() {
            return Err(PromptError::EmptyTag);
        }
        let found = template.matches(DATA_PLACEHOLDER).count();
        if found != 1 {
            return Err(PromptError::Placeholder { tag, found });
        }
        Ok(Self { tag, template })
    }

    /// `TAG="{{DATA}}"`.
    pub fn quoted(tag: &str) -> Self {
        Self::new(tag, format!("{tag}=\"{DATA_PLACEHOLDER}\""))
            .expect("quoted template has one placeholder")
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    /// `None` for empty data: prompts never carry empty tags.
    pub fn decorate(&self, data: &str) -> Option<String> {
        if data.trim().is_empty() {
            None
        } else {
            Some(self.template.replacen(DATA_PLACEHOLDER, data, 1))
        }
    }
}

pub fn decorate(decorator: &Decorator, data: &str) -> Option<String> {
    decorator.decorate(data)
}

/// The decorators the prompter uses, one per data slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decorators {
    pub user_text: Decorator,
    pub answer: Decorator,
    pub chat_history: Decorator,
}

impl Default for Decorators {
    fn default() -> Self {
        Self {
            user_text: Decorator::quoted("USER TEXT"),
            answer: Decorator::quoted("DEPUTY ANSWER"),
            chat_history: Decorator::quoted("CHAT HISTORY"),
        }
    }
}

impl Decorators {
    /// Override slots from a `{slot: {tag, template}}` map. Slots are
    /// `userText`, `answer` and `chatHistory`.
    pub fn from_json(value: &serde_json::Value) -> Result<Self, PromptError> {
        #[derive(Deserialize)]
        struct Spec {
            tag: String,
            template: String,
        }
        let map: BTreeMap<String, Spec> = serde_json::from_value(value.clone())
            .map_err(|e| PromptError::UnknownSlot(e.to_string()))?;
        let mut out = Self::default();
        for (slot, spec) in map {
            let d = Decorator::new(spec.tag, spec.template)?;
            match slot.as_str() {
                "userText" => out.user_text = d,
                "answer" => out.answer = d,
                "chatHistory" => out.chat_history = d,
                _ => return Err(PromptError::UnknownSlot(slot)),
            }
        }
        Ok(out)
    }
}

/// Everything a single prompt depends on.
#[derive(Debug, Clone, Copy)]
pub struct PromptInput<'a> {
    pub context: &'a Context,
    pub world: &'a WorldState,
    pub companion: &'a CompanionRuntime,
    pub history: &'a [ChatMessage],
    pub situation_id: &'a str,
    pub now: NaiveDateTime,
    /// Uniform draw in `[0, 1)` selecting the motto among the unlocked ones.
    pub motto_roll: f64,
}

pub fn format_datetime(now: NaiveDateTime) -> String {
    format!("Current date and time: {}", now.format("%Y-%m-%d %H:%M"))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Prompter {
    pub decorators: Decorators,
}

impl Prompter {
    pub fn new(decorators: Decorators) -> Self {
        Self { decorators }
    }

    pub fn assemble(&self, input: &PromptInput<'_>) -> PromptData {
        let ctx = input.context;
        let companion = input.companion;
        let config = companion.config();
        let mut slots: Vec<String> = Vec::new();
        let mut push = |s: &str| {
            if !s.trim().is_empty() {
                slots.push(s.to_string());
            }
        };

        push(if ctx.persona.trim().is_empty() {
            &config.base_prompt
        } else {
            &ctx.persona
        });

        let mood_label = if ctx.mood.is_empty() {
            companion.mood().label()
        } else {
            ctx.mood.as_str()
        };
        if let Some(m) = config.moods.iter().find(|m| m.label == mood_label) {
            push(&m.prompt_piece);
        }

        if let Some(piece) = config.situation_piece(input.situation_id) {
            push(piece);
        }

        for line in unlocked_knowledge(config, input.world) {
            push(line);
        }
        push(&ctx.knowledge);

        let mottos = unlocked_mottos(config, input.world);
        if !mottos.is_empty() {
            let idx = ((input.motto_roll.clamp(0.0, 1.0) * mottos.len() as f64) as usize)
                .min(mottos.len() - 1);
            push(mottos[idx]);
        }

        if !ctx.companion_names.trim().is_empty() {
            push(&format!(
                "Other companions around: {}.",
                ctx.companion_names
            ));
        }

        if let Some(d) = self.decorators.user_text.decorate(ctx.user_data()) {
            push(&d);
        }
        if let Some(d) = self.decorators.answer.decorate(&ctx.answer) {
            push(&d);
        }

        push(&ctx.job);
        push(&format_datetime(input.now));
        push(&ctx.epilogue);

        let turns = history_turns(input.history, &config.name);
        PromptData {
            system_prompt: slots.join("\n"),
            turns,
            format: companion.model().prompt_format,
        }
    }
}

/// Flatten a multi-party history onto two roles: the speaker's own lines
/// become `assistant`, everyone else's `user`. Names stay in the content.
pub fn history_turns(history: &[ChatMessage], speaker: &str) -> Vec<PromptTurn> {
    history
        .iter()
        .map(|m| {
            let role = if m.sender == speaker {
                Role::Assistant
            } else {
                Role::User
            };
            PromptTurn::new(role, format!("{}: {}", m.sender, m.body))
        })
        .collect()
}

pub fn apply_chat_template(prompt: &PromptData) -> String {
    match prompt.format {
        PromptFormat::Chatml => render_chatml(prompt),
        PromptFormat::Mistral => render_mistral(prompt),
    }
}

fn render_chatml(prompt: &PromptData) -> String {
    let mut out = String::new();
    let mut push = |role: &str, content: &str| {
        out.push_str("<|im_start|>");
        out.push_str(role);
        out.push('\n');
        out.push_str(content);
        out.push_str("<|im_end|>\n");
    };
    push("system", &prompt.system_prompt);
    for t in &prompt.turns {
        push(
            match t.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            },
            &t.content,
        );
    }
    out.push_str("<|im_start|>assistant\n");
    out
}

/// Merge same-role neighbours and fold the system prompt into the first
/// user turn, yielding the strict user/assistant alternation Mistral expects.
pub fn mistral_turns(prompt: &PromptData) -> Vec<PromptTurn> {
    let mut merged: Vec<PromptTurn> = Vec::new();
    for t in &prompt.turns {
        let role = if t.role == Role::System {
            Role::User
        } else {
            t.role
        };
        match merged.last_mut() {
            Some(last) if last.role == role => {
                last.content.push('\n');
                last.content.push_str(&t.content);
            }
            _ => merged.push(PromptTurn::new(role, t.content.clone())),
        }
    }
    if merged.first().map(|t| t.role) != Some(Role::User) {
        merged.insert(0, PromptTurn::new(Role::User, ""));
    }
    let first = &mut merged[0];
    if !prompt.system_prompt.is_empty() {
        first.content = if first.content.is_empty() {
            prompt.system_prompt.clone()
        } else {
            format!("{}\n\n{}", prompt.system_prompt, first.content)
        };
    }
    if merged.last().map(|t| t.role) == Some(Role::Assistant) {
        merged.push(PromptTurn::new(Role::User, ""));
    }
    merged
}

fn render_mistral(prompt: &PromptData) -> String {
    let mut out = String::from("<s>");
    for t in mistral_turns(prompt) {
        match t.role {
            Role::User | Role::System => {
                out.push_str("[INST] ");
                out.push_str(&t.content);
                out.push_str(" [/INST]");
            }
            Role::Assistant => {
                out.push(' ');
                out.push_str(&t.content);
                out.push_str("</s>");
            }
        }
    }
    out
}
