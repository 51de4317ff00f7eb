//! Chats held by a running server.

use std::collections::HashMap;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rand::{Rng, SeedableRng};
use troupe_core::chat::{read_transcript, JsonlTranscript};
use troupe_core::clock::{Clock, SystemClock};
use troupe_core::orchestrator::{action_statuses, ActionStatus};
use troupe_core::{
    ChatRecord, ChatSession, Context, Engine, EngineError, EngineRng, ModerationPolicy,
    SessionSpec, WorldState,
};

use crate::events::EventLog;

pub const WORLD_FILE: &str = "world.json";

#[derive(Debug, Clone)]
pub struct ServerOptions {
    /// Seeds chat ids and per-chat RNGs.
    pub seed: u64,
    /// Transcripts and the world snapshot live here when set.
    pub data_dir: Option<PathBuf>,
    /// Allowed browser origin; any origin when unset.
    pub cors_origin: Option<String>,
    pub clock: Arc<dyn Clock>,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: None,
            cors_origin: None,
            clock: Arc::new(SystemClock),
        }
    }
}

/// One served chat. The session mutex doubles as the run lock.
pub struct ChatHandle {
    pub session: Arc<tokio::sync::Mutex<ChatSession>>,
    /// Readable while a run holds the session.
    pub record: RwLock<ChatRecord>,
    pub events: EventLog,
}

impl ChatHandle {
    fn new(session: ChatSession) -> Self {
        let record = RwLock::new(session.chat().clone());
        Self {
            session: Arc::new(tokio::sync::Mutex::new(session)),
            record,
            events: EventLog::default(),
        }
    }
}

pub struct AppState {
    pub engine: Arc<Engine>,
    pub options: ServerOptions,
    chats: RwLock<HashMap<String, Arc<ChatHandle>>>,
    rng: Mutex<EngineRng>,
}

#[derive(Debug)]
pub struct CreateChat {
    pub situation: String,
    pub participants: Vec<String>,
    pub policy: Option<ModerationPolicy>,
    pub seed: Option<u64>,
}

impl AppState {
    pub fn new(engine: Arc<Engine>, options: ServerOptions) -> Self {
        let rng = Mutex::new(EngineRng::seed_from_u64(options.seed));
        Self {
            engine,
            options,
            chats: RwLock::new(HashMap::new()),
            rng,
        }
    }

    /// Reload the world snapshot and every transcript from the data dir.
    pub fn load(&self) -> io::Result<usize> {
        let Some(dir) = self.options.data_dir.clone() else {
            return Ok(0);
        };
        std::fs::create_dir_all(&dir)?;
        let world_path = dir.join(WORLD_FILE);
        if world_path.exists() {
            let value: serde_json::Value = serde_json::from_slice(&std::fs::read(&world_path)?)?;
            let world = WorldState::from_snapshot(&value)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            self.engine.world().update(|w| *w = world);
        }
        let mut loaded = 0;
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        for path in paths {
            match self.restore_chat(&path) {
                Ok(()) => loaded += 1,
                Err(e) => tracing::warn!(path = %path.display(), error = %e, "transcript skipped"),
            }
        }
        Ok(loaded)
    }

    fn restore_chat(&self, path: &Path) -> Result<(), Box<dyn std::error::Error>> {
        let record = read_transcript(io::BufReader::new(std::fs::File::open(path)?))?;
        let participants = record
            .participants
            .iter()
            .filter(|p| *p != record.user())
            .cloned()
            .collect();
        let seed = self.rng.lock().random();
        let spec = SessionSpec::new(record.id.clone(), record.situation_id.clone(), participants)
            .seed(seed)
            .clock(self.options.clock.clone());
        let mut session = self.engine.create_session(spec)?;
        session.set_sink(Box::new(JsonlTranscript::resume(path, &record)?));
        let id = record.id.clone();
        session.restore(record);
        self.chats
            .write()
            .insert(id, Arc::new(ChatHandle::new(session)));
        Ok(())
    }

    pub fn create_chat(&self, request: CreateChat) -> Result<String, EngineError> {
        let (id, default_seed) = {
            let mut rng = self.rng.lock();
            let chats = self.chats.read();
            let id = loop {
                let id = uuid::Builder::from_random_bytes(rng.random())
                    .into_uuid()
                    .to_string();
                if !chats.contains_key(&id) {
                    break id;
                }
            };
            (id, rng.random())
        };
        let mut spec = SessionSpec::new(id.clone(), request.situation, request.participants)
            .seed(request.seed.unwrap_or(default_seed))
            .clock(self.options.clock.clone());
        if let Some(policy) = request.policy {
            spec = spec.policy(policy);
        }
        let mut session = self.engine.create_session(spec)?;
        if let Some(dir) = &self.options.data_dir {
            session.set_sink(Box::new(JsonlTranscript::create(
                JsonlTranscript::path_for(dir, &id),
            )));
        }
        self.chats
            .write()
            .insert(id.clone(), Arc::new(ChatHandle::new(session)));
        Ok(id)
    }

    pub fn chat(&self, id: &str) -> Option<Arc<ChatHandle>> {
        self.chats.read().get(id).cloned()
    }

    /// Actions of the chat's hosts against the current world.
    pub fn actions(&self, chat: &ChatHandle) -> Vec<ActionStatus> {
        let record = chat.record.read();
        let hosts: Vec<_> = record
            .others()
            .filter_map(|n| self.engine.config(n))
            .collect();
        action_statuses(hosts, &self.engine.world().snapshot())
    }

    /// Bookkeeping once a run ends: final events, snapshot and world file.
    pub fn finish_run(&self, chat: &ChatHandle, session: &ChatSession, ctx: &Context) {
        if let Some(error) = &ctx.error {
            chat.events.error(error, &ctx.conversation_id);
        }
        *chat.record.write() = session.chat().clone();
        let pending = session
            .pending()
            .map(|p| p.context.conversation_id.as_str());
        chat.events.done(&ctx.conversation_id, pending);
        if let Some(dir) = &self.options.data_dir {
            if let Err(e) = self.save_world(dir) {
                tracing::warn!(error = %e, "world snapshot not saved");
            }
        }
    }

    fn save_world(&self, dir: &Path) -> io::Result<()> {
        let snapshot = self.engine.world().snapshot().to_snapshot();
        let tmp = dir.join(format!("{WORLD_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_vec_pretty(&snapshot)?)?;
        std::fs::rename(tmp, dir.join(WORLD_FILE))
    }
}
