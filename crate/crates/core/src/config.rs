//! Companion configuration schema and validation.
//!
//! A configuration set is one JSON document holding an array of
//! [`CompanionConfig`] objects. Unknown fields are rejected so typos surface
//! at load time instead of silently disabling a feature.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::condition::Condition;

/// Built-in companion class names.
pub mod class {
    pub const USER: &str = "User";
    pub const CHAT_COMPANION: &str = "ChatCompanion";
    /// Sets the job for its host; the host runs the inference.
    pub const INSTRUCTION_DEPUTY: &str = "InstructionDeputy";
    /// Runs its own inference and hands the result to the host via `answer`.
    pub const ANSWER_DEPUTY: &str = "AnswerDeputy";
    /// Like [`ANSWER_DEPUTY`], and also posts the result to the chat as an excerpt.
    pub const EXCERPT_DEPUTY: &str = "ExcerptDeputy";
    /// Like [`ANSWER_DEPUTY`], and also posts the result to the chat as a quote.
    pub const QUOTE_DEPUTY: &str = "QuoteDeputy";

    pub const BUILTIN: &[&str] = &[
        USER,
        CHAT_COMPANION,
        INSTRUCTION_DEPUTY,
        ANSWER_DEPUTY,
        EXCERPT_DEPUTY,
        QUOTE_DEPUTY,
    ];

    pub const JOB_DEPUTIES: &[&str] = &[
        INSTRUCTION_DEPUTY,
        ANSWER_DEPUTY,
        EXCERPT_DEPUTY,
        QUOTE_DEPUTY,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompanionKind {
    User,
    Npc,
    Shell,
}

impl fmt::Display for CompanionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CompanionKind::User => "user",
            CompanionKind::Npc => "npc",
            CompanionKind::Shell => "shell",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct MoodSpec {
    pub label: String,
    pub probability: f64,
    pub prompt_piece: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionalLine {
    pub line: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<Condition>,
}

impl ConditionalLine {
    pub fn always(line: impl Into<String>) -> Self {
        Self {
            line: line.into(),
            condition: None,
        }
    }

    pub fn when(line: impl Into<String>, condition: Condition) -> Self {
        Self {
            line: line.into(),
            condition: Some(condition),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SituationPrompt {
    pub id: String,
    pub prompt_piece: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ActionDescription {
    pub id: String,
    pub label: String,
    pub deputy_name: String,
    pub companion_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<Condition>,
}

/// The slice of the user's document a deputy works on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeputyScope {
    LastSentence,
    LastParagraph,
    RandomParagraph,
    Some,
    FullDocument,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptFormat {
    Chatml,
    Mistral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ModelConfig {
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub context_token_budget: u32,
    pub prompt_format: PromptFormat,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
}

impl ModelConfig {
    /// Tokens left for the prompt once the completion is reserved.
    pub fn prompt_token_budget(&self) -> usize {
        self.context_token_budget.saturating_sub(self.max_tokens) as usize
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            model_id: "teknium/OpenHermes-2.5-Mistral-7B".into(),
            temperature: 0.7,
            max_tokens: 512,
            context_token_budget: 8192,
            prompt_format: PromptFormat::Chatml,
            stop_sequences: vec!["<|im_end|>".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CompanionConfig {
    pub name: String,
    #[serde(alias = "class")]
    pub class_name: String,
    pub description: String,
    #[serde(alias = "base_prompt")]
    pub base_prompt: String,
    pub kind: CompanionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bio: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avatar: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub situations: Vec<SituationPrompt>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub knowledge: Vec<ConditionalLine>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mottos: Vec<ConditionalLine>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub moods: Vec<MoodSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub actions: Vec<ActionDescription>,
    /// Retained verbatim; triggers have no runtime behaviour yet.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub triggers: Vec<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<DeputyScope>,
    #[serde(
        default,
        alias = "modelConfig",
        skip_serializing_if = "Option::is_none"
    )]
    pub model_override: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

impl CompanionConfig {
    /// Minimal config of the given kind; mostly useful in tests and fixtures.
    pub fn new(
        name: impl Into<String>,
        kind: CompanionKind,
        class_name: impl Into<String>,
    ) -> Self {
        Self {
            name: name.into(),
            class_name: class_name.into(),
            description: String::new(),
            base_prompt: String::new(),
            kind,
            bio: None,
            avatar: None,
            job: None,
            situations: Vec::new(),
            knowledge: Vec::new(),
            mottos: Vec::new(),
            moods: Vec::new(),
            actions: Vec::new(),
            triggers: Vec::new(),
            scope: None,
            model_override: None,
            temperature: None,
        }
    }

    pub fn npc(name: impl Into<String>, base_prompt: impl Into<String>) -> Self {
        let mut c = Self::new(name, CompanionKind::Npc, class::CHAT_COMPANION);
        c.base_prompt = base_prompt.into();
        c
    }

    pub fn deputy(name: impl Into<String>, job: impl Into<String>, scope: DeputyScope) -> Self {
        let mut c = Self::new(name, CompanionKind::Shell, class::INSTRUCTION_DEPUTY);
        c.job = Some(job.into());
        c.scope = Some(scope);
        c
    }

    pub fn situation_piece(&self, situation_id: &str) -> Option<&str> {
        self.situations
            .iter()
            .find(|s| s.id == situation_id)
            .map(|s| s.prompt_piece.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ValidationErrorKind {
    DuplicateName(String),
    MoodProbabilitySum(String),
    EmptyField,
    OutOfRange(String),
    UnknownClass(String),
    MultipleUsers,
    MissingJob,
    UnknownDeputy(String),
    UnknownHost(String),
    DuplicateActionId(String),
    InvalidModelConfig(String),
}

impl fmt::Display for ValidationErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationErrorKind::DuplicateName(m) => write!(f, "duplicate name {m}"),
            ValidationErrorKind::MoodProbabilitySum(m) => {
                write!(f, "mood probabilities sum to {m}")
            }
            ValidationErrorKind::EmptyField => f.write_str("must not be empty"),
            ValidationErrorKind::OutOfRange(m) => write!(f, "out of range: {m}"),
            ValidationErrorKind::UnknownClass(c) => write!(f, "unknown class `{c}`"),
            ValidationErrorKind::MultipleUsers => {
                f.write_str("more than one companion of kind `user`")
            }
            ValidationErrorKind::MissingJob => {
                f.write_str("a shell using a built-in deputy class needs a non-empty job")
            }
            ValidationErrorKind::UnknownDeputy(n) => write!(f, "`{n}` is not a configured shell"),
            ValidationErrorKind::UnknownHost(n) => write!(f, "`{n}` is not a configured NPC"),
            ValidationErrorKind::DuplicateActionId(id) => {
                write!(f, "action id `{id}` is used more than once")
            }
            ValidationErrorKind::InvalidModelConfig(m) => write!(f, "invalid model config: {m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationError {
    pub companion: String,
    pub path: String,
    pub kind: ValidationErrorKind,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}: {}", self.companion, self.path, self.kind)
    }
}

impl std::error::Error for ValidationError {}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed companion configuration: {0}")]
    Parse(#[from] serde_json::Error),
}

pub fn parse_configs(json: &str) -> Result<Vec<CompanionConfig>, ConfigError> {
    Ok(serde_json::from_str(json)?)
}

pub fn load_configs(path: impl AsRef<Path>) -> Result<Vec<CompanionConfig>, ConfigError> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_configs(&raw)
}

pub fn validate_config(configs: &[CompanionConfig]) -> Vec<ValidationError> {
    validate_config_with(configs, &[])
}

/// Validate against the built-in classes plus `custom_classes`.
pub fn validate_config_with(
    configs: &[CompanionConfig],
    custom_classes: &[&str],
) -> Vec<ValidationError> {
    let mut errors = Vec::new();
    let mut push = |companion: &str, path: String, kind: ValidationErrorKind| {
        errors.push(ValidationError {
            companion: companion.to_string(),
            path,
            kind,
        })
    };

    let mut first_index: BTreeMap<&str, usize> = BTreeMap::new();
    let mut seen_user = false;
    for (i, c) in configs.iter().enumerate() {
        let who = if c.name.is_empty() {
            "<unnamed>"
        } else {
            c.name.as_str()
        };
        if c.name.trim().is_empty() {
            push(who, "name".into(), ValidationErrorKind::EmptyField);
        } else if let Some(&j) = first_index.get(c.name.as_str()) {
            push(
                who,
                "name".into(),
                ValidationErrorKind::DuplicateName(format!("{:?} (configs #{j} and #{i})", c.name)),
            );
        } else {
            first_index.insert(c.name.as_str(), i);
        }

        let builtin = class::BUILTIN.contains(&c.class_name.as_str());
        let custom = custom_classes.contains(&c.class_name.as_str());
        if !builtin && !custom {
            push(
                who,
                "className".into(),
                ValidationErrorKind::UnknownClass(c.class_name.clone()),
            );
        }

        match c.kind {
            CompanionKind::User => {
                if seen_user {
                    push(who, "kind".into(), ValidationErrorKind::MultipleUsers);
                }
                seen_user = true;
            }
            CompanionKind::Npc => {
                if c.base_prompt.trim().is_empty() {
                    push(who, "basePrompt".into(), ValidationErrorKind::EmptyField);
                }
            }
            CompanionKind::Shell => {
                let has_job = c.job.as_deref().is_some_and(|j| !j.trim().is_empty());
                if !has_job && !custom {
                    push(who, "job".into(), ValidationErrorKind::MissingJob);
                }
            }
        }

        let mut sum = 0.0;
        for (m, mood) in c.moods.iter().enumerate() {
            if mood.label.trim().is_empty() {
                push(
                    who,
                    format!("moods[{m}].label"),
                    ValidationErrorKind::EmptyField,
                );
            }
            if !(0.0..=1.0).contains(&mood.probability) {
                push(
                    who,
                    format!("moods[{m}].probability"),
                    ValidationErrorKind::OutOfRange(format!("{} not in [0, 1]", mood.probability)),
                );
            }
            sum += mood.probability;
        }
        if sum > 1.0 + 1e-9 {
            push(
                who,
                "moods".into(),
                ValidationErrorKind::MoodProbabilitySum(format!("{sum} > 1.0")),
            );
        }

        for (field, lines) in [("knowledge", &c.knowledge), ("mottos", &c.mottos)] {
            for (n, l) in lines.iter().enumerate() {
                if l.line.trim().is_empty() {
                    push(
                        who,
                        format!("{field}[{n}].line"),
                        ValidationErrorKind::EmptyField,
                    );
                }
                if l.condition.as_ref().is_some_and(|c| c.key.is_empty()) {
                    push(
                        who,
                        format!("{field}[{n}].condition.key"),
                        ValidationErrorKind::EmptyField,
                    );
                }
            }
        }
        for (n, s) in c.situations.iter().enumerate() {
            if s.id.trim().is_empty() {
                push(
                    who,
                    format!("situations[{n}].id"),
                    ValidationErrorKind::EmptyField,
                );
            }
        }
        if let Some(t) = c.temperature {
            if !(0.0..=2.0).contains(&t) {
                push(
                    who,
                    "temperature".into(),
                    ValidationErrorKind::OutOfRange(format!("{t} not in [0, 2]")),
                );
            }
        }
        if let Some(model) = &c.model_override {
            for problem in model_problems(model) {
                push(
                    who,
                    "modelOverride".into(),
                    ValidationErrorKind::InvalidModelConfig(problem),
                );
            }
        }
    }

    let kind_of: BTreeMap<&str, CompanionKind> =
        configs.iter().map(|c| (c.name.as_str(), c.kind)).collect();
    let mut action_ids = HashSet::new();
    for c in configs {
        for (n, a) in c.actions.iter().enumerate() {
            let path = |f: &str| format!("actions[{n}].{f}");
            if a.id.trim().is_empty() {
                push(&c.name, path("id"), ValidationErrorKind::EmptyField);
            } else if !action_ids.insert(a.id.as_str()) {
                push(
                    &c.name,
                    path("id"),
                    ValidationErrorKind::DuplicateActionId(a.id.clone()),
                );
            }
            if kind_of.get(a.deputy_name.as_str()) != Some(&CompanionKind::Shell) {
                push(
                    &c.name,
                    path("deputyName"),
                    ValidationErrorKind::UnknownDeputy(a.deputy_name.clone()),
                );
            }
            if kind_of.get(a.companion_name.as_str()) != Some(&CompanionKind::Npc) {
                push(
                    &c.name,
                    path("companionName"),
                    ValidationErrorKind::UnknownHost(a.companion_name.clone()),
                );
            }
            if a.condition.as_ref().is_some_and(|c| c.key.is_empty()) {
                push(
                    &c.name,
                    path("condition.key"),
                    ValidationErrorKind::EmptyField,
                );
            }
        }
    }
    errors
}

fn model_problems(model: &ModelConfig) -> Vec<String> {
    let mut out = Vec::new();
    if model.model_id.trim().is_empty() {
        out.push("modelId must not be empty".into());
    }
    if model.max_tokens == 0 {
        out.push("maxTokens must be positive".into());
    }
    if model.context_token_budget <= model.max_tokens {
        out.push(format!(
            "contextTokenBudget {} must exceed maxTokens {}",
            model.context_token_budget, model.max_tokens
        ));
    }
    if !(0.0..=2.0).contains(&model.temperature) {
        out.push(format!("temperature {} not in [0, 2]", model.temperature));
    }
    out
}

/// Checks a standalone model configuration, e.g. the engine default.
pub fn validate_model(model: &ModelConfig) -> Result<(), String> {
    let problems = model_problems(model);
    if problems.is_empty() {
        Ok(())
    } else {
        Err(problems.join("; "))
    }
}

/// Every action declared anywhere in the set, in declaration order.
pub fn all_actions(configs: &[CompanionConfig]) -> impl Iterator<Item = &ActionDescription> {
    configs.iter().flat_map(|c| c.actions.iter())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condition::Comparator;

    fn mood(label: &str, p: f64) -> MoodSpec {
        MoodSpec {
            label: label.into(),
            probability: p,
            prompt_piece: format!("You are {label}."),
        }
    }

    #[test]
    fn duplicate_names() {
        let configs = vec![
            CompanionConfig::npc("Anders", "Anders."),
            CompanionConfig::npc("Anders", "Anders."),
        ];
        let errors = validate_config(&configs);
        assert_eq!(errors.len(), 1);
        assert!(
            matches!(&errors[0].kind, ValidationErrorKind::DuplicateName(m) if m.contains("Anders"))
        );
        assert!(errors[0].to_string().contains("#0 and #1"));
    }

    #[test]
    fn mood_sum_over_one() {
        let mut npc = CompanionConfig::npc("Anders", "Anders.");
        npc.moods = vec![mood("happy", 0.6), mood("sad", 0.6)];
        let errors = validate_config(&[npc]);
        assert_eq!(errors.len(), 1);
        assert_eq!(
            errors[0].kind,
            ValidationErrorKind::MoodProbabilitySum("1.2 > 1.0".into())
        );
        assert_eq!(errors[0].path, "moods");
    }

    #[test]
    fn mood_sum_exactly_one_is_fine() {
        let mut npc = CompanionConfig::npc("Anders", "Anders.");
        npc.moods = vec![mood("a", 0.7), mood("b", 0.2), mood("c", 0.1)];
        assert!(validate_config(&[npc]).is_empty());
    }

    #[test]
    fn well_formed_action_set() {
        let mut npc = CompanionConfig::npc("Anders", "Anders is a writer.");
        let deputy = CompanionConfig::deputy(
            "summary-deputy",
            "Summarise the USER TEXT.",
            DeputyScope::FullDocument,
        );
        npc.actions.push(ActionDescription {
            id: "summarise".into(),
            label: "Summarise my text".into(),
            deputy_name: "summary-deputy".into(),
            companion_name: "Anders".into(),
            condition: None,
        });
        assert_eq!(validate_config(&[npc, deputy]), vec![]);
    }

    #[test]
    fn dangling_action_references() {
        let mut npc = CompanionConfig::npc("Anders", "Anders.");
        npc.actions.push(ActionDescription {
            id: "a".into(),
            label: "A".into(),
            deputy_name: "Anders".into(),
            companion_name: "ghost".into(),
            condition: None,
        });
        let kinds: Vec<_> = validate_config(&[npc])
            .into_iter()
            .map(|e| e.kind)
            .collect();
        assert_eq!(
            kinds,
            vec![
                ValidationErrorKind::UnknownDeputy("Anders".into()),
                ValidationErrorKind::UnknownHost("ghost".into())
            ]
        );
    }

    #[test]
    fn npc_needs_base_prompt_and_shell_needs_job() {
        let npc = CompanionConfig::new("A", CompanionKind::Npc, class::CHAT_COMPANION);
        let shell = CompanionConfig::new("S", CompanionKind::Shell, class::INSTRUCTION_DEPUTY);
        let custom = CompanionConfig::new("C", CompanionKind::Shell, "ThemeFinder");
        let errors = validate_config_with(&[npc, shell, custom], &["ThemeFinder"]);
        let paths: Vec<_> = errors
            .iter()
            .map(|e| (e.companion.as_str(), e.path.as_str()))
            .collect();
        assert_eq!(paths, vec![("A", "basePrompt"), ("S", "job")]);
    }

    #[test]
    fn unknown_class_and_second_user() {
        let u1 = CompanionConfig::new("Kim", CompanionKind::User, class::USER);
        let u2 = CompanionConfig::new("Sam", CompanionKind::User, "Nope");
        let kinds: Vec<_> = validate_config(&[u1, u2])
            .into_iter()
            .map(|e| e.kind)
            .collect();
        assert_eq!(
            kinds,
            vec![
                ValidationErrorKind::UnknownClass("Nope".into()),
                ValidationErrorKind::MultipleUsers
            ]
        );
    }

    #[test]
    fn model_override_budget_must_exceed_max_tokens() {
        let mut npc = CompanionConfig::npc("A", "A.");
        npc.model_override = Some(ModelConfig {
            max_tokens: 4096,
            context_token_budget: 4096,
            ..ModelConfig::default()
        });
        npc.temperature = Some(2.5);
        let paths: Vec<_> = validate_config(&[npc])
            .into_iter()
            .map(|e| e.path)
            .collect();
        assert_eq!(paths, vec!["temperature", "modelOverride"]);
    }

    #[test]
    fn strict_parsing_rejects_unknown_fields() {
        let json = r#"[{"name":"A","className":"ChatCompanion","description":"","basePrompt":"A.","kind":"npc","moood":[]}]"#;
        assert!(matches!(parse_configs(json), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn parses_full_entry() {
        let json = r#"[{
            "name": "Anders", "className": "ChatCompanion", "description": "writer",
            "basePrompt": "You are Anders.", "kind": "npc", "bio": "Writes.",
            "knowledge": [{"line": "L1"}, {"line": "L2", "condition": {"key": "INTERACTIONS_Anders", "comparator": ">=", "value": 3}}],
            "moods": [{"label": "happy", "probability": 0.3, "promptPiece": "You are happy."}],
            "triggers": [{"anything": true}],
            "modelConfig": {"modelId": "m", "temperature": 0.2, "maxTokens": 10, "contextTokenBudget": 100, "promptFormat": "mistral"}
        }]"#;
        let configs = parse_configs(json).unwrap();
        assert_eq!(
            configs[0].knowledge[1]
                .condition
                .as_ref()
                .unwrap()
                .comparator,
            Comparator::Ge
        );
        assert_eq!(
            configs[0].model_override.as_ref().unwrap().prompt_format,
            PromptFormat::Mistral
        );
        assert_eq!(configs[0].triggers.len(), 1);
        assert!(validate_config(&configs).is_empty());
    }

    #[test]
    fn validation_is_order_stable() {
        let mut a = CompanionConfig::npc("A", "");
        a.moods = vec![mood("", 0.9), mood("x", 0.9)];
        let configs = vec![a.clone(), a];
        assert_eq!(validate_config(&configs), validate_config(&configs));
    }
}
