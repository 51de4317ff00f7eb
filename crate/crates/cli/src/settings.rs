//! TOML settings for `serve`. Command line flags win over the file.
//!
//! ```toml
//! [server]
//! port = 8080
//! corsOrigin = "http://localhost:5173"
//! dataDir = "data"
//!
//! [backend]
//! baseUrl = "http://localhost:8000/v1"
//! modelId = "teknium/OpenHermes-2.5-Mistral-7B"
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;
use troupe_core::backend::ApiEndpoint;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Settings {
    #[serde(default)]
    pub server: ServerSettings,
    #[serde(default)]
    pub backend: BackendSettings,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ServerSettings {
    pub host: Option<String>,
    pub port: Option<u16>,
    pub cors_origin: Option<String>,
    pub data_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct BackendSettings {
    pub base_url: Option<String>,
    pub model_id: Option<String>,
    pub endpoint: Option<ApiEndpoint>,
    pub timeout_secs: Option<u64>,
    pub max_concurrency: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum SettingsError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: toml::de::Error,
    },
}

impl Settings {
    pub fn load(path: &Path) -> Result<Self, SettingsError> {
        let text = std::fs::read_to_string(path).map_err(|source| SettingsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text).map_err(|source| SettingsError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_both_sections() {
        let s = Settings::parse(
            "[server]\nport = 9000\ncorsOrigin = \"http://ui\"\n\n[backend]\nbaseUrl = \"http://llm/v1\"\nendpoint = \"completions\"\n",
        )
        .unwrap();
        assert_eq!(s.server.port, Some(9000));
        assert_eq!(s.server.cors_origin.as_deref(), Some("http://ui"));
        assert_eq!(s.backend.base_url.as_deref(), Some("http://llm/v1"));
        assert_eq!(s.backend.endpoint, Some(ApiEndpoint::Completions));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Settings::parse("[server]\nprot = 1\n").is_err());
        assert!(Settings::parse("").unwrap().server.port.is_none());
    }
}
