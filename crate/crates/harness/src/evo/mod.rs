//! Self-evolved trajectory synthesis: classify, question, annotate, select,
//! roll out, export. Fine-tuning between iterations happens elsewhere.

pub mod audit;
pub mod category;
pub mod export;
pub mod iterate;
pub mod sim;
pub mod stages;

use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::chat::BackendError;

pub use audit::{audit, AuditReport};
pub use category::TaskCategory;
pub use export::{export_dataset, ConversationRecord, DatasetStats, ExportFilters};
pub use iterate::{
    iterate, process_video, run_iteration, HandoffManifest, IterationOutcome, PipelineConfig,
    VideoOutcome,
};
pub use sim::SimulatedVideoModel;
pub use stages::{RelevanceMatrix, Segment, SyntheticScript, Video};

/// Canonical assistant output for a silent turn.
pub const SILENT: &str = realstream_core::timeline::SILENT_MARKER;

#[derive(Debug, Error)]
pub enum EvoError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("no conversations to export")]
    NothingToExport,
    #[error("writing {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("malformed {what}: {message}")]
    Malformed { what: String, message: String },
    #[error("dataset {path} does not match manifest hash (expected {expected}, found {found})")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("audit sample size {requested} exceeds dataset size {available}")]
    AuditSize { requested: usize, available: usize },
    #[error("invalid pipeline config: {0}")]
    Config(String),
}
