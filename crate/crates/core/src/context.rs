//! The per-exchange envelope passed between companions, deputies and the prompter.

use serde::{Deserialize, Serialize};

/// Administrative record left behind by the summariser.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SummaryInfo {
    pub original_chars: usize,
    pub passes: usize,
    pub truncated: bool,
}

/// Empty strings mean "not set".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct Context {
    // downstream
    pub chat: String,
    pub knowledge: String,
    pub text: String,
    pub paragraph: String,
    pub epilogue: String,
    pub input: String,
    pub action: String,
    // midstream
    pub persona: String,
    pub job: String,
    pub mood: String,
    // upstream
    pub question: String,
    pub answer: String,
    pub excerpt: String,
    pub quote: String,
    pub message: String,
    // internal
    pub companion_names: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(rename = "conversationID", alias = "conversationId")]
    pub conversation_id: String,
    /// Speakers the moderator must pick next, in order.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub recipients: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<SummaryInfo>,
    /// Carried through untouched; tools are not supported.
    pub tool: String,
}

impl Context {
    pub fn new(conversation_id: impl Into<String>) -> Self {
        Self {
            conversation_id: conversation_id.into(),
            ..Self::default()
        }
    }

    pub fn has_error(&self) -> bool {
        self.error.is_some()
    }

    /// Record an error; later errors are appended to earlier ones.
    pub fn note_error(&mut self, error: impl Into<String>) {
        let error = error.into();
        match &mut self.error {
            Some(existing) => {
                existing.push_str("; ");
                existing.push_str(&error);
            }
            None => self.error = Some(error),
        }
    }

    /// The user document a deputy operates on: the client text, else the
    /// client paragraph, else whatever the user typed in answer to a question.
    pub fn document(&self) -> &str {
        [&self.text, &self.paragraph, &self.input]
            .into_iter()
            .find(|s| !s.trim().is_empty())
            .map(String::as_str)
            .unwrap_or("")
    }

    /// The text the prompter labels as user data: a scoped paragraph wins over the full text.
    pub fn user_data(&self) -> &str {
        if !self.paragraph.trim().is_empty() {
            &self.paragraph
        } else {
            &self.text
        }
    }

    pub fn has_upstream(&self) -> bool {
        [&self.question, &self.quote, &self.excerpt, &self.message]
            .iter()
            .any(|s| !s.is_empty())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversation_id_uses_table_spelling_on_the_wire() {
        let ctx = Context::new("c-1");
        let json = serde_json::to_value(&ctx).unwrap();
        assert_eq!(json["conversationID"], "c-1");
        let back: Context = serde_json::from_str(r#"{"conversationId":"c-2","text":"T"}"#).unwrap();
        assert_eq!(back.conversation_id, "c-2");
        assert_eq!(back.text, "T");
    }

    #[test]
    fn document_falls_back_to_input() {
        let mut ctx = Context::new("c");
        assert_eq!(ctx.document(), "");
        ctx.input = "answer".into();
        assert_eq!(ctx.document(), "answer");
        ctx.paragraph = "para".into();
        assert_eq!(ctx.document(), "para");
        ctx.text = "text".into();
        assert_eq!(ctx.document(), "text");
        assert_eq!(ctx.user_data(), "para");
    }

    #[test]
    fn errors_accumulate() {
        let mut ctx = Context::default();
        ctx.note_error("a");
        ctx.note_error("b");
        assert_eq!(ctx.error.as_deref(), Some("a; b"));
    }
}
