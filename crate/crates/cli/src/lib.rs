//! Library side of the `realstream` and `evo` binaries. Commands take a
//! [`Runtime`] so tests can swap the HTTP transport.

pub mod analyze;
pub mod bench;
pub mod config;
pub mod eval;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use realstream_harness::cache::{CachedChatModel, ContentCache};
use realstream_harness::chat::{
    BackendError, ChatModel, HttpChatModel, HttpTransport, ScriptedChatModel, Transport,
};
use realstream_harness::evo::EvoError;

use config::{usage, ModelConfig, ModelKind, RunConfig, UsageError};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Process-wide collaborators.
#[derive(Clone)]
pub struct Runtime {
    pub transport: Arc<dyn Transport>,
}

impl Default for Runtime {
    fn default() -> Self {
        Runtime {
            transport: Arc::new(HttpTransport::new()),
        }
    }
}

/// A model endpoint that could not be reached at all; exit code 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unreachable(pub String);

impl fmt::Display for Unreachable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "backend unreachable: {}", self.0)
    }
}

impl std::error::Error for Unreachable {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    /// Some samples or videos failed; the rest completed.
    Partial,
}

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_UNREACHABLE: u8 = 2;
pub const EXIT_PARTIAL: u8 = 3;

pub fn status_code(status: Status) -> u8 {
    match status {
        Status::Ok => EXIT_OK,
        Status::Partial => EXIT_PARTIAL,
    }
}

pub fn error_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if cause.is::<Unreachable>() {
            return EXIT_UNREACHABLE;
        }
        if let Some(b) = cause.downcast_ref::<BackendError>() {
            return if b.is_transport() {
                EXIT_UNREACHABLE
            } else {
                EXIT_PARTIAL
            };
        }
        if let Some(EvoError::Backend(b)) = cause.downcast_ref::<EvoError>() {
            return if b.is_transport() {
                EXIT_UNREACHABLE
            } else {
                EXIT_PARTIAL
            };
        }
        if let Some(EvoError::Config(_)) = cause.downcast_ref::<EvoError>() {
            return EXIT_USAGE;
        }
    }
    EXIT_USAGE
}

pub fn open_cache(cfg: &RunConfig) -> Result<Option<Arc<ContentCache>>> {
    cfg.cache_dir
        .as_ref()
        .map(|dir| {
            ContentCache::open(dir)
                .map(Arc::new)
                .with_context(|| format!("opening cache {}", dir.display()))
        })
        .transpose()
}

/// Accepts every answer: correct, not repeated, intent present, full marks.
pub fn lenient_judge() -> ScriptedChatModel {
    ScriptedChatModel::new("lenient-judge", |req| {
        let text = req.all_text();
        if text.contains("\"correct\"") {
            r#"{"correct": true, "reasoning": "lenient"}"#.into()
        } else if text.contains("\"is_repeated\"") {
            r#"{"is_repeated": false, "reasoning": "lenient"}"#.into()
        } else if text.contains("\"yes\" or \"no\"") {
            "yes".into()
        } else {
            "0.5".into()
        }
    })
}

/// Chat model for an `http` or `lenient` section, cached when a cache is
/// configured.
pub fn chat_model(
    section: &ModelConfig,
    rt: &Runtime,
    cache: Option<&Arc<ContentCache>>,
) -> Result<Arc<dyn ChatModel>> {
    let inner: Arc<dyn ChatModel> = match section.kind {
        ModelKind::Http => Arc::new(HttpChatModel::new(
            section.endpoint_config(),
            rt.transport.clone(),
        )),
        ModelKind::Lenient => Arc::new(lenient_judge()),
        other => return Err(usage(format!("{other:?} is not a chat model"))),
    };
    Ok(match cache {
        Some(c) => Arc::new(CachedChatModel::new(inner, c.clone())),
        None => inner,
    })
}

/// Written next to every command's artifacts.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub constants: BTreeMap<String, serde_json::Value>,
    /// Artifact path relative to the output directory, with its SHA-256.
    pub artifacts: BTreeMap<String, String>,
    pub status: Status,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        let constants = [
            ("fps", serde_json::json!(cfg.fps)),
            ("far_delta", serde_json::json!(cfg.far_delta)),
            (
                "premature_penalty",
                serde_json::json!(cfg.premature_penalty),
            ),
            (
                "tokens_per_frame",
                serde_json::json!(cfg.generation.tokens_per_frame),
            ),
            ("seed", serde_json::json!(cfg.seed)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        RunManifest {
            command: command.to_string(),
            config_hash: cfg.hash(),
            constants,
            artifacts: BTreeMap::new(),
            status: Status::Ok,
        }
    }

    pub fn record(&mut self, out_dir: &Path, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        let rel = path.strip_prefix(out_dir).unwrap_or(path);
        self.artifacts
            .insert(rel.to_string_lossy().replace('\\', "/"), sha256_hex(&bytes));
        Ok(())
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join("run_manifest.json");
        write_file(&path, &serde_json::to_vec_pretty(self)?)?;
        Ok(path)
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
