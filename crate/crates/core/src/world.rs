//! Global key-value store of tracked stats.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

/// Schema tag written into exported snapshots under [`SNAPSHOT_SCHEMA_KEY`].
pub const WORLD_SNAPSHOT_SCHEMA: &str = "troupe.world/1";
pub const SNAPSHOT_SCHEMA_KEY: &str = "$schema";

/// Key under which the orchestrator counts chat entries per companion.
pub fn interactions_key(name: &str) -> String {
    format!("INTERACTIONS_{name}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WorldValue {
    Number(f64),
    Text(String),
}

impl WorldValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            WorldValue::Number(n) => Some(*n),
            WorldValue::Text(_) => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            WorldValue::Text(s) => Some(s),
            WorldValue::Number(_) => None,
        }
    }
}

impl From<f64> for WorldValue {
    fn from(n: f64) -> Self {
        WorldValue::Number(n)
    }
}

impl From<i64> for WorldValue {
    fn from(n: i64) -> Self {
        WorldValue::Number(n as f64)
    }
}

impl From<&str> for WorldValue {
    fn from(s: &str) -> Self {
        WorldValue::Text(s.to_string())
    }
}

impl From<String> for WorldValue {
    fn from(s: String) -> Self {
        WorldValue::Text(s)
    }
}

impl fmt::Display for WorldValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WorldValue::Number(n) => write!(f, "{n}"),
            WorldValue::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WorldError {
    #[error("world-state keys must be non-empty")]
    EmptyKey,
    #[error("key `{0}` is reserved")]
    ReservedKey(String),
    #[error("cannot increment `{key}`: it holds text {value:?}")]
    NotNumeric { key: String, value: String },
    #[error("increment delta must be a positive finite number, got {0}")]
    InvalidDelta(f64),
    #[error("snapshot schema {found:?} is not supported (expected {WORLD_SNAPSHOT_SCHEMA:?})")]
    UnsupportedSchema { found: String },
    #[error("malformed snapshot: {0}")]
    Malformed(String),
}

/// Case-sensitive map of stats. Counters only grow through [`WorldState::increment`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WorldState {
    entries: BTreeMap<String, WorldValue>,
}

impl WorldState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &str) -> Option<&WorldValue> {
        self.entries.get(key)
    }

    pub fn number(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(WorldValue::as_number)
    }

    pub fn set(
        &mut self,
        key: impl Into<String>,
        value: impl Into<WorldValue>,
    ) -> Result<(), WorldError> {
        let key = key.into();
        check_key(&key)?;
        self.entries.insert(key, value.into());
        Ok(())
    }

    /// Add `delta` to a numeric entry, treating an absent key as `0`.
    pub fn increment(&mut self, key: &str, delta: f64) -> Result<f64, WorldError> {
        check_key(key)?;
        if !(delta.is_finite() && delta > 0.0) {
            return Err(WorldError::InvalidDelta(delta));
        }
        let current = match self.entries.get(key) {
            None => 0.0,
            Some(WorldValue::Number(n)) => *n,
            Some(WorldValue::Text(s)) => {
                return Err(WorldError::NotNumeric {
                    key: key.to_string(),
                    value: s.clone(),
                })
            }
        };
        let next = current + delta;
        self.entries
            .insert(key.to_string(), WorldValue::Number(next));
        Ok(next)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &WorldValue)> {
        self.entries.iter()
    }

    /// Flat JSON object of all entries plus the `$schema` tag.
    pub fn to_snapshot(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        map.insert(SNAPSHOT_SCHEMA_KEY.into(), WORLD_SNAPSHOT_SCHEMA.into());
        for (k, v) in &self.entries {
            map.insert(
                k.clone(),
                serde_json::to_value(v).expect("world values serialize"),
            );
        }
        serde_json::Value::Object(map)
    }

    pub fn from_snapshot(value: &serde_json::Value) -> Result<Self, WorldError> {
        let obj = value
            .as_object()
            .ok_or_else(|| WorldError::Malformed("snapshot must be a JSON object".into()))?;
        let mut state = WorldState::new();
        for (k, v) in obj {
            if k == SNAPSHOT_SCHEMA_KEY {
                match v.as_str() {
                    Some(WORLD_SNAPSHOT_SCHEMA) => continue,
                    other => {
                        return Err(WorldError::UnsupportedSchema {
                            found: other.map(str::to_string).unwrap_or_else(|| v.to_string()),
                        })
                    }
                }
            }
            let value = match v {
                serde_json::Value::Number(n) => WorldValue::Number(
                    n.as_f64()
                        .ok_or_else(|| WorldError::Malformed(format!("{k}: {n}")))?,
                ),
                serde_json::Value::String(s) => WorldValue::Text(s.clone()),
                other => {
                    return Err(WorldError::Malformed(format!(
                        "{k}: unsupported value {other}"
                    )))
                }
            };
            state.set(k.clone(), value)?;
        }
        Ok(state)
    }
}

fn check_key(key: &str) -> Result<(), WorldError> {
    if key.is_empty() {
        Err(WorldError::EmptyKey)
    } else if key == SNAPSHOT_SCHEMA_KEY {
        Err(WorldError::ReservedKey(key.to_string()))
    } else {
        Ok(())
    }
}

/// World state shared by every chat session of one engine.
#[derive(Debug, Clone, Default)]
pub struct SharedWorld(Arc<Mutex<WorldState>>);

impl SharedWorld {
    pub fn new(state: WorldState) -> Self {
        Self(Arc::new(Mutex::new(state)))
    }

    pub fn snapshot(&self) -> WorldState {
        self.0.lock().clone()
    }

    pub fn update<R>(&self, f: impl FnOnce(&mut WorldState) -> R) -> R {
        f(&mut self.0.lock())
    }
}
