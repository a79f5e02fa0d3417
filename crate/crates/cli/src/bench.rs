//! Benchmark manifests: which timelines to run and where their frames live.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use realstream_core::StreamTimeline;
use realstream_harness::session::SessionJob;

use crate::config::usage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Timeline document, relative to the manifest.
    pub timeline: PathBuf,
    /// Explicit frame references, one per turn.
    #[serde(default)]
    pub frames: Option<Vec<String>>,
    /// Video URI; frames become `<video>#t=<seconds>` at the timeline fps.
    #[serde(default)]
    pub video: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkManifest {
    pub format_version: u32,
    pub samples: Vec<ManifestEntry>,
}

fn frames_for(entry: &ManifestEntry, timeline: &StreamTimeline) -> Result<Vec<String>> {
    match (&entry.frames, &entry.video) {
        (Some(f), _) => Ok(f.clone()),
        (None, Some(v)) => Ok((1..=timeline.turn_count())
            .map(|t| format!("{v}#t={}", timeline.seconds_at(t)))
            .collect()),
        (None, None) => Err(usage(format!(
            "sample {} lists neither frames nor video",
            timeline.sample_id()
        ))),
    }
}

/// Loads every timeline named by the manifest, in manifest order.
pub fn load_benchmark(path: &Path) -> Result<Vec<SessionJob>> {
    let text = fs::read_to_string(path).map_err(|e| {
        usage(format!(
            "cannot read benchmark manifest {}: {e}",
            path.display()
        ))
    })?;
    let manifest: BenchmarkManifest = serde_json::from_str(&text).map_err(|e| {
        usage(format!(
            "invalid benchmark manifest {}: {e}",
            path.display()
        ))
    })?;
    if manifest.format_version != realstream_core::timeline::FORMAT_VERSION {
        return Err(usage(format!(
            "benchmark manifest format_version {} is not supported",
            manifest.format_version
        )));
    }
    if manifest.samples.is_empty() {
        return Err(usage("no samples"));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut jobs = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let tpath = base.join(&entry.timeline);
        let text = fs::read_to_string(&tpath)
            .with_context(|| format!("reading timeline {}", tpath.display()))
            .map_err(|e| usage(format!("{e:#}")))?;
        let timeline: StreamTimeline = serde_json::from_str(&text)
            .map_err(|e| usage(format!("invalid timeline {}: {e}", tpath.display())))?;
        let frames = frames_for(entry, &timeline)?;
        if frames.len() != timeline.turn_count() as usize {
            return Err(usage(format!(
                "sample {} has {} frames for {} turns",
                timeline.sample_id(),
                frames.len(),
                timeline.turn_count()
            )));
        }
        jobs.push(SessionJob { timeline, frames });
    }
    let mut ids: Vec<&str> = jobs.iter().map(|j| j.timeline.sample_id()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(usage(format!("duplicate sample id {}", w[0])));
    }
    Ok(jobs)
}
