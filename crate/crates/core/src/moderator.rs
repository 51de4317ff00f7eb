//! Speaker selection.
//!
//! Rules are tried in order and the first one with a non-empty result wins:
//!
//! 1. recipients named in the context
//! 2. the only other participant of a 1:1 chat
//! 3. participants mentioned in the last message, in mention order
//! 4. round robin, when the policy asks for it
//! 5. a random draw, when the policy asks for it
//! 6. the model's pick from recent history
//! 7. a random draw
//!
//! Every result is filtered by the policy before it counts.

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDateTime;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{AdminData, Backend, Job};
use crate::chat::ChatRecord;
use crate::config::{CompanionKind, ModelConfig};
use crate::context::Context;
use crate::prompter::{PromptData, PromptTurn, Role};
use crate::EngineRng;

pub const MODERATOR_PROMPT: &str = include_str!("../assets/moderator.txt");
pub const HISTORY_WINDOW: usize = 8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    Auto,
    RoundRobin,
    Random,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct ModerationPolicy {
    pub selection_mode: SelectionMode,
    pub excluded_speakers: BTreeSet<String>,
    pub allow_repeat: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Rule {
    Recipients = 1,
    OnlyOther = 2,
    Mentions = 3,
    RoundRobin = 4,
    Random = 5,
    ModelPick = 6,
    Fallback = 7,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    /// Companions to run this round, in order.
    pub speakers: Vec<String>,
    /// The user was selected after `speakers`; the conversation ends with them.
    pub yields_to_user: bool,
    pub rule: Rule,
}

impl Selection {
    fn user(rule: Rule) -> Self {
        Self {
            speakers: Vec::new(),
            yields_to_user: true,
            rule,
        }
    }

    pub fn is_user(&self) -> bool {
        self.speakers.is_empty()
    }
}

/// Earliest whole-word occurrence of `needle` in `haystack`.
fn find_word(haystack: &str, needle: &str) -> Option<usize> {
    if needle.is_empty() {
        return None;
    }
    let is_word = |c: char| c.is_alphanumeric() || c == '_';
    haystack.match_indices(needle).map(|(i, _)| i).find(|&i| {
        let before = haystack[..i].chars().next_back();
        let after = haystack[i + needle.len()..].chars().next();
        !before.is_some_and(is_word) && !after.is_some_and(is_word)
    })
}

/// Participants named in `text`, ordered by first mention.
pub fn mentioned(text: &str, names: &[&str]) -> Vec<String> {
    let mut hits: Vec<(usize, &str)> = names
        .iter()
        .filter_map(|n| find_word(text, n).map(|i| (i, *n)))
        .collect();
    hits.sort();
    let mut seen = BTreeSet::new();
    hits.into_iter()
        .filter(|(_, n)| seen.insert(*n))
        .map(|(_, n)| n.to_string())
        .collect()
}

/// First candidate named in the model's reply, case-insensitively.
pub fn parse_model_pick(reply: &str, candidates: &[&str]) -> Option<String> {
    let lowered = reply.to_lowercase();
    candidates
        .iter()
        .filter_map(|c| find_word(&lowered, &c.to_lowercase()).map(|i| (i, *c)))
        .min_by_key(|(i, _)| *i)
        .map(|(_, c)| c.to_string())
}

pub struct ModerationInput<'a> {
    pub chat: &'a ChatRecord,
    pub kinds: &'a BTreeMap<String, CompanionKind>,
    pub policy: &'a ModerationPolicy,
    pub backend: &'a dyn Backend,
    pub now: NaiveDateTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moderator {
    /// System prompt; `{participants}` is replaced by the candidate names.
    pub prompt: String,
    pub model: ModelConfig,
}

impl Default for Moderator {
    fn default() -> Self {
        Self {
            prompt: MODERATOR_PROMPT.trim_end().to_string(),
            model: ModelConfig {
                temperature: 0.1,
                max_tokens: 16,
                ..ModelConfig::default()
            },
        }
    }
}

struct Filter<'a> {
    user: &'a str,
    previous: Option<&'a str>,
    kinds: &'a BTreeMap<String, CompanionKind>,
    policy: &'a ModerationPolicy,
    action_active: bool,
}

impl Filter<'_> {
    fn keeps(&self, name: &str, allow_user: bool, check_repeat: bool) -> bool {
        if name == self.user {
            return allow_user;
        }
        if self.policy.excluded_speakers.contains(name) {
            return false;
        }
        if check_repeat && !self.policy.allow_repeat && self.previous == Some(name) {
            return false;
        }
        let is_shell = self.kinds.get(name) == Some(&CompanionKind::Shell);
        !is_shell || self.action_active
    }

    fn apply(&self, names: Vec<String>, allow_user: bool, check_repeat: bool) -> Vec<String> {
        names
            .into_iter()
            .filter(|n| self.keeps(n, allow_user, check_repeat))
            .collect()
    }
}

impl Moderator {
    fn finish(&self, names: Vec<String>, user: &str, rule: Rule) -> Option<Selection> {
        if names.is_empty() {
            return None;
        }
        let (speakers, yields_to_user) = match names.iter().position(|n| n == user) {
            Some(i) => (names[..i].to_vec(), true),
            None => (names, false),
        };
        Some(Selection {
            speakers,
            yields_to_user,
            rule,
        })
    }

    fn job(&self, input: &ModerationInput<'_>, ctx: &Context, pool: &[String]) -> Option<Job> {
        let system = self.prompt.replace("{participants}", &pool.join(", "));
        let prompt = PromptData {
            system_prompt: system,
            turns: vec![PromptTurn::new(
                Role::User,
                format!("{}\n\nWho speaks next?", ctx.chat),
            )],
            format: self.model.prompt_format,
        };
        let admin = AdminData {
            job_id: format!(
                "{}-moderator-{}",
                input.chat.id,
                input.chat.messages().len()
            ),
            chat_id: input.chat.id.clone(),
            speaker_name: "moderator".into(),
            created_at: input.now,
            attempt: 1,
        };
        Job::new(ctx.clone(), self.model.clone(), prompt, admin).ok()
    }

    pub async fn select_next_speakers(
        &self,
        input: &ModerationInput<'_>,
        ctx: &mut Context,
        rng: &mut EngineRng,
    ) -> Selection {
        let chat = input.chat;
        let user = chat.user();
        let filter = Filter {
            user,
            previous: chat.last_message().map(|m| m.sender.as_str()),
            kinds: input.kinds,
            policy: input.policy,
            action_active: !ctx.action.is_empty(),
        };

        let recipients = std::mem::take(&mut ctx.recipients);
        if let Some(s) = self.finish(
            filter.apply(recipients, true, false),
            user,
            Rule::Recipients,
        ) {
            return s;
        }

        let talkers: Vec<String> = chat
            .others()
            .filter(|n| input.kinds.get(*n) != Some(&CompanionKind::Shell))
            .map(String::from)
            .collect();
        if talkers.len() == 1 {
            if let Some(s) = self.finish(
                filter.apply(talkers.clone(), false, true),
                user,
                Rule::OnlyOther,
            ) {
                return s;
            }
        }

        if let Some(last) = chat.last_message() {
            let names: Vec<&str> = chat.participants.iter().map(String::as_str).collect();
            let hits = mentioned(&last.body, &names);
            if let Some(s) = self.finish(filter.apply(hits, true, true), user, Rule::Mentions) {
                return s;
            }
        }

        let pool: Vec<String> = chat
            .others()
            .filter(|n| filter.keeps(n, false, true))
            .map(String::from)
            .collect();
        if pool.is_empty() {
            return Selection::user(Rule::Fallback);
        }

        match input.policy.selection_mode {
            SelectionMode::RoundRobin => {
                let order: Vec<&str> = chat.others().collect();
                let start = chat
                    .last_message()
                    .and_then(|m| order.iter().position(|n| *n == m.sender))
                    .map_or(0, |i| i + 1);
                let next = (0..order.len())
                    .map(|k| order[(start + k) % order.len()])
                    .find(|n| pool.iter().any(|p| p == n));
                if let Some(s) = self.finish(
                    next.into_iter().map(String::from).collect(),
                    user,
                    Rule::RoundRobin,
                ) {
                    return s;
                }
            }
            SelectionMode::Random => {
                let pick = pool[rng.random_range(0..pool.len())].clone();
                return self
                    .finish(vec![pick], user, Rule::Random)
                    .expect("non-empty");
            }
            SelectionMode::Auto => {}
        }

        let window = chat.messages().len().saturating_sub(HISTORY_WINDOW);
        ctx.chat = chat.messages()[window..]
            .iter()
            .map(|m| format!("{}: {}", m.sender, m.body))
            .collect::<Vec<_>>()
            .join("\n");
        if let Some(job) = self.job(input, ctx, &pool) {
            match input.backend.complete(&job).await {
                Ok(reply) => {
                    let mut candidates: Vec<&str> = pool.iter().map(String::as_str).collect();
                    candidates.push(user);
                    candidates.push("user");
                    let pick = parse_model_pick(&reply.text, &candidates).map(|p| {
                        if p.eq_ignore_ascii_case("user") {
                            user.to_string()
                        } else {
                            p
                        }
                    });
                    if let Some(s) = pick.and_then(|p| self.finish(vec![p], user, Rule::ModelPick))
                    {
                        return s;
                    }
                }
                Err(e) => {
                    tracing::warn!(chat = %chat.id, error = %e, "moderator model failed, drawing at random")
                }
            }
        }

        let pick = pool[rng.random_range(0..pool.len())].clone();
        self.finish(vec![pick], user, Rule::Fallback)
            .expect("non-empty")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whole_word_mentions_in_order() {
        let names = ["User", "Anders", "Greta"];
        assert_eq!(
            mentioned("Greta, then Anders?", &names),
            vec!["Greta", "Anders"]
        );
        assert_eq!(
            mentioned("Andersen and greta", &names),
            Vec::<String>::new()
        );
        assert_eq!(
            mentioned("Anders! Anders, Greta", &names),
            vec!["Anders", "Greta"]
        );
        assert_eq!(mentioned("ask the User", &names), vec!["User"]);
    }

    #[test]
    fn model_pick_parsing() {
        let c = ["Anders", "Greta", "user"];
        assert_eq!(parse_model_pick("greta", &c).as_deref(), Some("Greta"));
        assert_eq!(
            parse_model_pick("I think GRETA, or anders", &c).as_deref(),
            Some("Greta")
        );
        assert_eq!(parse_model_pick("The user.", &c).as_deref(), Some("user"));
        assert_eq!(parse_model_pick("nobody", &c), None);
    }

    #[test]
    fn prompt_asks_for_next_logical_speaker() {
        assert!(MODERATOR_PROMPT.contains("next logical speaker"));
        assert!(MODERATOR_PROMPT.contains("{participants}"));
    }
}
