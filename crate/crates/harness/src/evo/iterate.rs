//! Per-iteration orchestration and the handoff between iterations.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::chat::{BackendError, ChatModel};
use crate::pool::{bounded_pool, map_ordered};
use crate::session::DEFAULT_SYSTEM_PROMPT;

use super::export::{
    content_hash, export_dataset, ConversationRecord, ExportFilters, ExportSummary, Provenance,
};
use super::stages::{self, Video, DEFAULT_CAPTION_CAP, DEFAULT_SEGMENT_SECONDS};
use super::EvoError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub segment_seconds: f64,
    /// Upper bound K on self-generated questions per video.
    pub max_questions: usize,
    pub caption_cap: usize,
    pub parallelism: usize,
    pub filters: ExportFilters,
    pub system_prompt: Option<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            segment_seconds: DEFAULT_SEGMENT_SECONDS,
            max_questions: 5,
            caption_cap: DEFAULT_CAPTION_CAP,
            parallelism: 4,
            filters: ExportFilters::default(),
            system_prompt: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), EvoError> {
        if self.segment_seconds.is_nan() || self.segment_seconds <= 0.0 {
            return Err(EvoError::Config("segment_seconds must be positive".into()));
        }
        if self.max_questions == 0 {
            return Err(EvoError::Config("max_questions must be at least 1".into()));
        }
        if self.caption_cap == 0 {
            return Err(EvoError::Config("caption_cap must be at least 1".into()));
        }
        Ok(())
    }

    fn system(&self) -> String {
        self.system_prompt
            .clone()
            .unwrap_or_else(|| DEFAULT_SYSTEM_PROMPT.trim_end().to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    Unclassified,
    NoQuestions,
    NoRelevantEvidence,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VideoOutcome {
    Record(Box<ConversationRecord>),
    Skipped {
        video_id: String,
        reason: SkipReason,
    },
}

/// Stages 1 to 4 for one video.
pub fn process_video(
    video: &Video,
    model: &dyn ChatModel,
    config: &PipelineConfig,
    iteration: u32,
) -> Result<VideoOutcome, BackendError> {
    let skip = |reason| {
        log::info!("{}: skipped ({reason:?})", video.video_id);
        Ok(VideoOutcome::Skipped {
            video_id: video.video_id.clone(),
            reason,
        })
    };
    let Some(category) = stages::classify_video(video, model)? else {
        return skip(SkipReason::Unclassified);
    };
    let questions = stages::generate_questions(video, category, model, config.max_questions)?;
    if questions.is_empty() {
        return skip(SkipReason::NoQuestions);
    }
    let segments = video.segments(config.segment_seconds);
    let mut matrix = stages::annotate_relevance(video, category, &segments, &questions, model)?;
    matrix.drop_irrelevant_columns();
    if matrix.question_count() == 0 {
        return skip(SkipReason::NoRelevantEvidence);
    }
    let selection = stages::select_question(category, &matrix, model)?;
    let turns = stages::rollout(category, &matrix, &selection, model, config.caption_cap)?;
    Ok(VideoOutcome::Record(Box::new(ConversationRecord {
        video_id: video.video_id.clone(),
        category,
        tracked_question: selection.index + 1,
        question: matrix.questions[selection.index].clone(),
        system: config.system(),
        duration_s: video.duration_s,
        question_count: matrix.question_count(),
        turns,
        provenance: Provenance {
            prompts: stages::prompt_fingerprints(),
            backend_id: model.id().to_string(),
            iteration,
        },
    })))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub iteration: u32,
    pub dataset_path: PathBuf,
    pub export: ExportSummary,
    pub skipped: Vec<(String, SkipReason)>,
    /// Videos whose backend calls failed; rerunning resumes them from cache.
    pub failed: Vec<(String, String)>,
}

pub fn dataset_path(out_dir: &Path, iteration: u32) -> PathBuf {
    out_dir.join(format!("dataset_{iteration}.jsonl"))
}

/// Stage 5 over the whole pool. Videos run concurrently, results keep pool
/// order.
pub fn run_iteration(
    videos: &[Video],
    model: Arc<dyn ChatModel>,
    config: &PipelineConfig,
    iteration: u32,
    out_dir: &Path,
) -> Result<IterationReport, EvoError> {
    config.validate()?;
    let pool = bounded_pool(config.parallelism);
    let outcomes = map_ordered(&pool, videos, |v| {
        (
            v.video_id.clone(),
            process_video(v, model.as_ref(), config, iteration),
        )
    });
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut failed = Vec::new();
    let mut first_error = None;
    for (id, outcome) in outcomes {
        match outcome {
            Ok(VideoOutcome::Record(r)) => records.push(*r),
            Ok(VideoOutcome::Skipped { video_id, reason }) => skipped.push((video_id, reason)),
            Err(e) => {
                log::warn!("{id}: {e}");
                failed.push((id, e.to_string()));
                first_error.get_or_insert(e);
            }
        }
    }
    if records.is_empty() {
        if let Some(e) = first_error {
            return Err(EvoError::Backend(e));
        }
    }
    let path = dataset_path(out_dir, iteration);
    let export = export_dataset(records, &config.filters, skipped.len(), &path)?;
    Ok(IterationReport {
        iteration,
        dataset_path: path,
        export,
        skipped,
        failed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandoffStatus {
    /// Waiting for the endpoint of the model fine-tuned on `dataset_path`.
    AwaitingEndpoint,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandoffManifest {
    pub iteration: u32,
    pub dataset_path: PathBuf,
    pub record_count: usize,
    pub content_hash: String,
    pub iterations_total: u32,
    pub next_iteration: Option<u32>,
    pub status: HandoffStatus,
    pub backend_id: String,
}

pub fn manifest_path(out_dir: &Path, iteration: u32) -> PathBuf {
    out_dir.join(format!("handoff_{iteration}.json"))
}

impl HandoffManifest {
    pub fn write(&self, path: &Path) -> Result<(), EvoError> {
        let bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        fs::write(path, bytes).map_err(|source| EvoError::Write {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, EvoError> {
        let bytes = fs::read(path).map_err(|source| EvoError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_slice(&bytes).map_err(|e| EvoError::Malformed {
            what: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Checks that the dataset on disk is the one the manifest names.
    pub fn verify(&self) -> Result<(), EvoError> {
        let bytes = fs::read(&self.dataset_path).map_err(|source| EvoError::Read {
            path: self.dataset_path.clone(),
            source,
        })?;
        let found = content_hash(&bytes);
        if found != self.content_hash {
            return Err(EvoError::HashMismatch {
                path: self.dataset_path.clone(),
                expected: self.content_hash.clone(),
                found,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutcome {
    pub reports: Vec<IterationReport>,
    pub manifests: Vec<HandoffManifest>,
    /// Set when the loop stopped for want of the next endpoint.
    pub paused_at: Option<u32>,
}

/// Runs iterations `start..iterations`. `endpoint(i)` supplies the model for
/// iteration `i`; `None` pauses cleanly with the last manifest on disk.
pub fn iterate(
    videos: &[Video],
    config: &PipelineConfig,
    iterations: u32,
    start: u32,
    out_dir: &Path,
    endpoint: impl Fn(u32) -> Option<Arc<dyn ChatModel>>,
) -> Result<IterationOutcome, EvoError> {
    if iterations == 0 || start >= iterations {
        return Err(EvoError::Config(format!(
            "start iteration {start} outside 0..{iterations}"
        )));
    }
    let mut outcome = IterationOutcome {
        reports: Vec::new(),
        manifests: Vec::new(),
        paused_at: None,
    };
    for i in start..iterations {
        let Some(model) = endpoint(i) else {
            log::info!("no endpoint for iteration {i}; pausing");
            outcome.paused_at = Some(i);
            break;
        };
        let report = run_iteration(videos, model.clone(), config, i, out_dir)?;
        let last = i + 1 == iterations;
        let manifest = HandoffManifest {
            iteration: i,
            dataset_path: report.dataset_path.clone(),
            record_count: report.export.records.len(),
            content_hash: report.export.content_hash.clone(),
            iterations_total: iterations,
            next_iteration: (!last).then_some(i + 1),
            status: if last {
                HandoffStatus::Complete
            } else {
                HandoffStatus::AwaitingEndpoint
            },
            backend_id: model.id().to_string(),
        };
        manifest.write(&manifest_path(out_dir, i))?;
        outcome.manifests.push(manifest);
        outcome.reports.push(report);
    }
    Ok(outcome)
}

/// Reads a video pool from a directory of `*.json` files (sorted by name),
/// a JSON array, or a JSONL file.
pub fn load_videos(path: &Path) -> Result<Vec<Video>, EvoError> {
    let read = |p: &Path| {
        fs::read_to_string(p).map_err(|source| EvoError::Read {
            path: p.to_path_buf(),
            source,
        })
    };
    let malformed = |p: &Path, e: serde_json::Error| EvoError::Malformed {
        what: p.display().to_string(),
        message: e.to_string(),
    };
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|source| EvoError::Read {
                path: path.to_path_buf(),
                source,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        return files
            .iter()
            .map(|p| serde_json::from_str(&read(p)?).map_err(|e| malformed(p, e)))
            .collect();
    }
    let text = read(path)?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).map_err(|e| malformed(path, e));
    }
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| malformed(path, e)))
        .collect()
}
