//! The `troupe` command. Exit codes: 0 success, 1 semantic failure,
//! 2 I/O failure.

pub mod scenario;
pub mod settings;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use troupe_core::backend::{OpenAiBackend, OpenAiSettings, Script, ScriptedBackend};
use troupe_core::config::{load_configs, ConfigError};
use troupe_core::{validate_config, Backend, CompanionConfig, Engine, ModelConfig};
use troupe_server::{AppState, ServerOptions};

use crate::scenario::ScenarioError;
use crate::settings::Settings;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_IO: i32 = 2;

/// Reply used by `serve --backend mock` when no script is given.
pub const MOCK_REPLY: &str = "(mock reply)";

#[derive(Debug, Parser)]
#[command(name = "troupe", version, about = "Multi-companion chat engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a companion configuration file.
    Validate { config: PathBuf },
    /// Replay a scenario against a scripted backend.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Scenario JSON.
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSONL transcript here.
        #[arg(long)]
        transcript: Option<PathBuf>,
        /// Write a JSON summary of the final state here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        host: Option<String>,
        #[arg(long, value_enum, default_value_t = BackendKind::Mock)]
        backend: BackendKind,
        /// Backend script for mock mode.
        #[arg(long)]
        script: Option<PathBuf>,
        /// TOML settings file.
        #[arg(long)]
        settings: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        cors_origin: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Mock,
    Live,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn semantic(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_FAILURE,
            message: message.into(),
        }
    }

    fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::io(e.to_string()),
            ConfigError::Parse(_) => Failure::semantic(e.to_string()),
        }
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Io(_) => Failure::io(e.to_string()),
            _ => Failure::semantic(e.to_string()),
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Validate { config } => validate(&config),
        Command::Run {
            config,
            script,
            seed,
            transcript,
            report,
        } => runtime().and_then(|rt| {
            rt.block_on(run_scenario(
                &config,
                &script,
                seed,
                transcript.as_deref(),
                report.as_deref(),
            ))
        }),
        Command::Serve {
            config,
            port,
            host,
            backend,
            script,
            settings,
            data_dir,
            cors_origin,
            seed,
        } => {
            let flags = ServeFlags {
                port,
                host,
                backend,
                script,
                data_dir,
                cors_origin,
                seed,
            };
            runtime().and_then(|rt| rt.block_on(serve(&config, settings.as_deref(), flags)))
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Runtime::new()
        .map_err(|e| Failure::io(format!("cannot start the runtime: {e}")))
}

fn load_valid(path: &Path) -> Result<Vec<CompanionConfig>, Failure> {
    let configs = load_configs(path)?;
    let errors = validate_config(&configs);
    if errors.is_empty() {
        Ok(configs)
    } else {
        for e in &errors {
            eprintln!("{e}");
        }
        Err(Failure::semantic(format!(
            "{} has {} problem(s)",
            path.display(),
            errors.len()
        )))
    }
}

fn validate(path: &Path) -> Result<(), Failure> {
    let configs = load_valid(path)?;
    println!("OK: {} companions", configs.len());
    Ok(())
}

async fn run_scenario(
    config: &Path,
    script: &Path,
    seed: u64,
    transcript: Option<&Path>,
    report: Option<&Path>,
) -> Result<(), Failure> {
    let configs = load_valid(config)?;
    let scenario = scenario::load(script)?;
    let outcome = scenario::run(configs, &scenario, seed, transcript).await?;
    let mut out = std::io::stdout().lock();
    for m in &outcome.events {
        let _ = writeln!(out, "[{}] {}: {}", m.kind.as_str(), m.sender, m.body);
    }
    for e in &outcome.report.errors {
        eprintln!("warning: {e}");
    }
    if let Some(path) = report {
        let json = serde_json::to_vec_pretty(&outcome.report).expect("reports serialize");
        std::fs::write(path, json)
            .map_err(|e| Failure::io(format!("cannot write {}: {e}", path.display())))?;
    }
    if let Some(expect) = &scenario.expect {
        let user = troupe_core::orchestrator::DEFAULT_USER;
        expect
            .check(&outcome, user)
            .map_err(|d| Failure::from(ScenarioError::Expectation(d)))?;
        let _ = writeln!(out, "expectations hold");
    }
    Ok(())
}

#[derive(Debug)]
struct ServeFlags {
    port: Option<u16>,
    host: Option<String>,
    backend: BackendKind,
    script: Option<PathBuf>,
    data_dir: Option<PathBuf>,
    cors_origin: Option<String>,
    seed: Option<u64>,
}

fn build_backend(
    kind: BackendKind,
    script: Option<&Path>,
    settings: &Settings,
) -> Result<Arc<dyn Backend>, Failure> {
    match kind {
        BackendKind::Mock => {
            let backend = match script {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| Failure::io(format!("cannot read {}: {e}", path.display())))?;
                    let script: Script = serde_json::from_str(&text)
                        .map_err(|e| Failure::semantic(format!("{}: {e}", path.display())))?;
                    ScriptedBackend::from_script(&script).map_err(Failure::semantic)?
                }
                None => ScriptedBackend::new(vec![]).with_default(MOCK_REPLY),
            };
            Ok(Arc::new(backend))
        }
        BackendKind::Live => {
            let b = &settings.backend;
            let mut http = OpenAiSettings::new(
                b.base_url
                    .clone()
                    .unwrap_or_else(|| "http://localhost:8000/v1".into()),
            );
            if let Some(e) = b.endpoint {
                http.endpoint = e;
            }
            if let Some(t) = b.timeout_secs {
                http.timeout_secs = t;
            }
            if let Some(c) = b.max_concurrency {
                http.max_concurrency = c;
            }
            let backend =
                OpenAiBackend::from_env(http).map_err(|e| Failure::semantic(e.to_string()))?;
            Ok(Arc::new(backend))
        }
    }
}

async fn serve(config: &Path, settings: Option<&Path>, flags: ServeFlags) -> Result<(), Failure> {
    init_tracing();
    let settings = match settings {
        Some(p) => Settings::load(p).map_err(|e| match e {
            settings::SettingsError::Io { .. } => Failure::io(e.to_string()),
            settings::SettingsError::Parse { .. } => Failure::semantic(e.to_string()),
        })?,
        None => Settings::default(),
    };
    let configs = load_valid(config)?;
    let backend = build_backend(flags.backend, flags.script.as_deref(), &settings)?;
    let mut builder = Engine::builder(configs);
    if let Some(model_id) = &settings.backend.model_id {
        builder = builder.model_defaults(ModelConfig {
            model_id: model_id.clone(),
            ..ModelConfig::default()
        });
    }
    let engine = Arc::new(
        builder
            .build(backend)
            .map_err(|e| Failure::semantic(e.to_string()))?,
    );

    let server = settings.server;
    let options = ServerOptions {
        seed: flags.seed.or(server.seed).unwrap_or(0),
        data_dir: flags.data_dir.or(server.data_dir),
        cors_origin: flags.cors_origin.or(server.cors_origin),
        ..ServerOptions::default()
    };
    let state = Arc::new(AppState::new(engine, options));
    let restored = state
        .load()
        .map_err(|e| Failure::io(format!("cannot load the data directory: {e}")))?;
    if restored > 0 {
        tracing::info!(restored, "chats reloaded");
    }

    let host = flags
        .host
        .or(server.host)
        .unwrap_or_else(|| "127.0.0.1".into());
    let port = flags.port.or(server.port).unwrap_or(8080);
    let listener = tokio::net::TcpListener::bind((host.as_str(), port))
        .await
        .map_err(|e| Failure::semantic(format!("cannot listen on {host}:{port}: {e}")))?;
    let addr = listener
        .local_addr()
        .map_err(|e| Failure::io(e.to_string()))?;
    println!("listening on http://{addr}");
    let _ = std::io::stdout().flush();
    troupe_server::serve(listener, state)
        .await
        .map_err(|e| Failure::io(format!("server stopped: {e}")))
}

fn init_tracing() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}
