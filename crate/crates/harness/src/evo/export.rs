//! Conversation standardization, validity filters and dataset export.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::category::TaskCategory;
use super::stages::ConversationTurn;
use super::{EvoError, SILENT};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Template names with a short content hash each.
    pub prompts: Vec<String>,
    pub backend_id: String,
    pub iteration: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationRecord {
    pub video_id: String,
    pub category: TaskCategory,
    /// 1-based position of the tracked question among surviving questions.
    pub tracked_question: usize,
    pub question: String,
    pub system: String,
    pub duration_s: f64,
    /// Questions that survived annotation for this video.
    pub question_count: usize,
    pub turns: Vec<ConversationTurn>,
    pub provenance: Provenance,
}

impl ConversationRecord {
    pub fn action_sequence(&self) -> Vec<&str> {
        self.turns.iter().map(|t| t.assistant.as_str()).collect()
    }

    pub fn response_count(&self) -> usize {
        self.turns.iter().filter(|t| t.assistant != SILENT).count()
    }

    /// Chat-format rendering: system, then per turn a user message carrying
    /// the segment refs and optional query, then the assistant output.
    pub fn chat_messages(&self) -> Vec<Value> {
        let mut out = vec![json!({"role": "system", "content": self.system})];
        for t in &self.turns {
            let mut content: Vec<Value> = t
                .segment_refs
                .iter()
                .map(|r| json!({"type": "video_url", "video_url": {"url": r}}))
                .collect();
            if let Some(u) = &t.user {
                content.push(json!({"type": "text", "text": u}));
            }
            out.push(json!({"role": "user", "content": content}));
            out.push(json!({"role": "assistant", "content": t.assistant}));
        }
        out
    }

    /// First turn index whose action disagrees with its relevance row and
    /// roll-out decision.
    pub fn inconsistent_turn(&self) -> Option<usize> {
        self.turns.iter().position(|t| {
            let silent = t.assistant == SILENT;
            match (t.relevant, t.decision) {
                (false, None) => !silent,
                (false, Some(_)) => true,
                (true, Some(true)) => silent || t.assistant.trim().is_empty(),
                (true, Some(false)) => !silent,
                (true, None) => true,
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Empty,
    Inconsistent,
    NoEvidence,
    Duplicate,
    AllSilent,
    OverLimit,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportFilters {
    /// Also drop conversations with no response at all.
    pub drop_all_silent: bool,
    pub max_records: Option<usize>,
}

/// Filter verdict for one record in isolation (duplicates need the batch).
pub fn validity_issue(record: &ConversationRecord, filters: &ExportFilters) -> Option<DropReason> {
    if record.turns.is_empty() || record.question.trim().is_empty() {
        return Some(DropReason::Empty);
    }
    if record.inconsistent_turn().is_some() {
        return Some(DropReason::Inconsistent);
    }
    if !record.turns.iter().any(|t| t.relevant) {
        return Some(DropReason::NoEvidence);
    }
    if filters.drop_all_silent && record.response_count() == 0 {
        return Some(DropReason::AllSilent);
    }
    None
}

/// Applies every filter in input order; returns kept records and drop counts.
pub fn apply_filters(
    records: Vec<ConversationRecord>,
    filters: &ExportFilters,
) -> (Vec<ConversationRecord>, BTreeMap<DropReason, usize>) {
    let mut dropped = BTreeMap::new();
    let mut seen = BTreeSet::new();
    let mut kept = Vec::new();
    for r in records {
        let reason = validity_issue(&r, filters).or_else(|| {
            let key = (
                r.video_id.clone(),
                r.question.to_lowercase(),
                r.action_sequence()
                    .iter()
                    .map(|s| s.to_string())
                    .collect::<Vec<_>>(),
            );
            (!seen.insert(key)).then_some(DropReason::Duplicate)
        });
        let reason = reason.or_else(|| {
            filters
                .max_records
                .is_some_and(|m| kept.len() >= m)
                .then_some(DropReason::OverLimit)
        });
        match reason {
            Some(d) => *dropped.entry(d).or_insert(0) += 1,
            None => kept.push(r),
        }
    }
    (kept, dropped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub records: usize,
    pub categories: BTreeMap<TaskCategory, usize>,
    /// Keyed by a duration bucket label such as `1-3min`.
    pub durations: BTreeMap<String, usize>,
    pub mean_questions_per_video: f64,
    pub mean_responses_per_record: f64,
    pub skipped_videos: usize,
    pub dropped: BTreeMap<DropReason, usize>,
}

const DURATION_BUCKETS: [(f64, &str); 5] = [
    (60.0, "0-1min"),
    (180.0, "1-3min"),
    (300.0, "3-5min"),
    (600.0, "5-10min"),
    (f64::INFINITY, "10min+"),
];

fn duration_bucket(d: f64) -> &'static str {
    DURATION_BUCKETS
        .iter()
        .find(|(hi, _)| d < *hi)
        .map_or("10min+", |(_, l)| l)
}

pub fn dataset_stats(
    records: &[ConversationRecord],
    skipped_videos: usize,
    dropped: BTreeMap<DropReason, usize>,
) -> DatasetStats {
    let mut categories = BTreeMap::new();
    let mut durations: BTreeMap<String, usize> = BTreeMap::new();
    let mut per_video: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        *categories.entry(r.category).or_insert(0) += 1;
        *durations
            .entry(duration_bucket(r.duration_s).to_string())
            .or_insert(0) += 1;
        per_video.insert(&r.video_id, r.question_count);
    }
    let mean = |total: usize, n: usize| if n == 0 { 0.0 } else { total as f64 / n as f64 };
    DatasetStats {
        records: records.len(),
        categories,
        durations,
        mean_questions_per_video: mean(per_video.values().sum(), per_video.len()),
        mean_responses_per_record: mean(
            records.iter().map(|r| r.response_count()).sum(),
            records.len(),
        ),
        skipped_videos,
        dropped,
    }
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), EvoError> {
    let wrap = |source| EvoError::Write {
        path: path.to_path_buf(),
        source,
    };
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(wrap)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(wrap)?;
    tmp.write_all(bytes).map_err(wrap)?;
    tmp.persist(path).map_err(|e| wrap(e.error))?;
    Ok(())
}

pub fn dataset_bytes(records: &[ConversationRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportSummary {
    pub records: Vec<ConversationRecord>,
    pub stats: DatasetStats,
    pub content_hash: String,
}

/// Filters and writes `path` (JSONL) and `<path>.stats.json`. Nothing is
/// left behind on failure since both go through a temp file and rename.
pub fn export_dataset(
    records: Vec<ConversationRecord>,
    filters: &ExportFilters,
    skipped_videos: usize,
    path: &Path,
) -> Result<ExportSummary, EvoError> {
    if records.is_empty() {
        return Err(EvoError::NothingToExport);
    }
    let (kept, dropped) = apply_filters(records, filters);
    let stats = dataset_stats(&kept, skipped_videos, dropped);
    let bytes = dataset_bytes(&kept);
    let stats_path = stats_path(path);
    write_atomic(path, &bytes)?;
    let stats_json = serde_json::to_vec_pretty(&stats).expect("stats serialize");
    if let Err(e) = write_atomic(&stats_path, &stats_json) {
        let _ = fs::remove_file(path);
        return Err(e);
    }
    Ok(ExportSummary {
        records: kept,
        stats,
        content_hash: content_hash(&bytes),
    })
}

pub fn stats_path(dataset: &Path) -> std::path::PathBuf {
    let mut s = dataset.as_os_str().to_owned();
    s.push(".stats.json");
    s.into()
}

pub fn read_dataset(path: &Path) -> Result<Vec<ConversationRecord>, EvoError> {
    let file = fs::File::open(path).map_err(|source| EvoError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| EvoError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| EvoError::Malformed {
                what: format!("{} line {}", path.display(), i + 1),
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}
