//! Chat records and their JSON Lines persistence.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

pub const TRANSCRIPT_SCHEMA: &str = "troupe.transcript/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageKind {
    Message,
    Excerpt,
    Quote,
    Question,
}

impl MessageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::Message => "message",
            MessageKind::Excerpt => "excerpt",
            MessageKind::Quote => "quote",
            MessageKind::Question => "question",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChatMessage {
    pub sender: String,
    pub body: String,
    pub kind: MessageKind,
    pub conversation_id: String,
    pub timestamp: NaiveDateTime,
}

/// Append-only history of one chat room.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChatRecord {
    pub id: String,
    pub situation_id: String,
    /// Includes the user.
    pub participants: Vec<String>,
    user: String,
    messages: Vec<ChatMessage>,
    interaction_counts: BTreeMap<String, u64>,
}

impl ChatRecord {
    pub fn new(
        id: impl Into<String>,
        situation_id: impl Into<String>,
        user: impl Into<String>,
        participants: Vec<String>,
    ) -> Self {
        let user = user.into();
        let mut participants = participants;
        if !participants.contains(&user) {
            participants.insert(0, user.clone());
        }
        Self {
            id: id.into(),
            situation_id: situation_id.into(),
            participants,
            user,
            messages: Vec::new(),
            interaction_counts: BTreeMap::new(),
        }
    }

    pub fn user(&self) -> &str {
        &self.user
    }

    pub fn messages(&self) -> &[ChatMessage] {
        &self.messages
    }

    pub fn last_message(&self) -> Option<&ChatMessage> {
        self.messages.last()
    }

    pub fn interaction_counts(&self) -> &BTreeMap<String, u64> {
        &self.interaction_counts
    }

    pub fn interaction_count(&self, name: &str) -> u64 {
        self.interaction_counts.get(name).copied().unwrap_or(0)
    }

    /// Non-user participants, in declaration order.
    pub fn others(&self) -> impl Iterator<Item = &str> {
        self.participants
            .iter()
            .map(String::as_str)
            .filter(move |p| *p != self.user)
    }

    pub fn append(&mut self, message: ChatMessage) {
        if message.sender != self.user {
            *self
                .interaction_counts
                .entry(message.sender.clone())
                .or_default() += 1;
        }
        self.messages.push(message);
    }

    fn header(&self) -> TranscriptHeader {
        TranscriptHeader {
            schema: TRANSCRIPT_SCHEMA.into(),
            chat_id: self.id.clone(),
            situation_id: self.situation_id.clone(),
            user: self.user.clone(),
            participants: self.participants.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct TranscriptHeader {
    schema: String,
    chat_id: String,
    situation_id: String,
    user: String,
    participants: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum TranscriptError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported transcript schema {0:?}")]
    Schema(String),
    #[error("empty transcript")]
    Empty,
}

/// Header line followed by one message per line.
pub fn write_transcript(record: &ChatRecord, mut out: impl Write) -> io::Result<()> {
    serde_json::to_writer(&mut out, &record.header())?;
    out.write_all(b"\n")?;
    for m in record.messages() {
        serde_json::to_writer(&mut out, m)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn transcript_string(record: &ChatRecord) -> String {
    let mut buf = Vec::new();
    write_transcript(record, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("JSON is UTF-8")
}

pub fn read_transcript(input: impl BufRead) -> Result<ChatRecord, TranscriptError> {
    let mut lines = input.lines().enumerate();
    let (_, first) = lines.next().ok_or(TranscriptError::Empty)?;
    let header: TranscriptHeader = serde_json::from_str(&first?)
        .map_err(|source| TranscriptError::Json { line: 1, source })?;
    if header.schema != TRANSCRIPT_SCHEMA {
        return Err(TranscriptError::Schema(header.schema));
    }
    let mut record = ChatRecord::new(
        header.chat_id,
        header.situation_id,
        header.user,
        header.participants,
    );
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let message: ChatMessage =
            serde_json::from_str(&line).map_err(|source| TranscriptError::Json {
                line: i + 1,
                source,
            })?;
        record.append(message);
    }
    Ok(record)
}

/// Receives the chat after every completed round.
pub trait TranscriptSink: Send {
    fn persist(&mut self, record: &ChatRecord) -> io::Result<()>;
}

/// Appends new messages to `<dir>/<chat id>.jsonl` and fsyncs.
#[derive(Debug)]
pub struct JsonlTranscript {
    path: PathBuf,
    file: Option<BufWriter<File>>,
    written: usize,
}

impl JsonlTranscript {
    pub fn path_for(dir: &Path, chat_id: &str) -> PathBuf {
        dir.join(format!("{chat_id}.jsonl"))
    }

    /// A new transcript; an existing file is truncated.
    pub fn create(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            file: None,
            written: 0,
        }
    }

    /// Continue a transcript already holding `record`'s messages.
    pub fn resume(path: impl Into<PathBuf>, record: &ChatRecord) -> io::Result<Self> {
        let path = path.into();
        let file = OpenOptions::new().append(true).open(&path)?;
        Ok(Self {
            path,
            file: Some(BufWriter::new(file)),
            written: record.messages().len(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl TranscriptSink for JsonlTranscript {
    fn persist(&mut self, record: &ChatRecord) -> io::Result<()> {
        if self.file.is_none() {
            let mut f = BufWriter::new(File::create(&self.path)?);
            serde_json::to_writer(&mut f, &record.header())?;
            f.write_all(b"\n")?;
            self.file = Some(f);
        }
        let f = self.file.as_mut().expect("opened above");
        for m in &record.messages()[self.written..] {
            serde_json::to_writer(&mut *f, m)?;
            f.write_all(b"\n")?;
        }
        self.written = record.messages().len();
        f.flush()?;
        f.get_ref().sync_all()
    }
}
