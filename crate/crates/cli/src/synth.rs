//! `synth` and `audit`: trajectory synthesis and dataset inspection.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use serde::Serialize;

use realstream_harness::chat::ChatModel;
use realstream_harness::evo::export::read_dataset;
use realstream_harness::evo::iterate::{load_videos, HandoffStatus};
use realstream_harness::evo::{
    audit, iterate, AuditReport, HandoffManifest, SimulatedVideoModel, Video,
};

use crate::config::{usage, ModelConfig, ModelKind, RunConfig};
use crate::{chat_model, open_cache, write_file, RunManifest, Runtime, Status};

#[derive(Debug, Clone, Default)]
pub struct SynthOptions {
    /// Handoff manifest of the previous iteration.
    pub resume: Option<PathBuf>,
    /// Overrides `synth.generator` for this invocation.
    pub generator: Option<ModelConfig>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthOutcome {
    pub manifests: Vec<HandoffManifest>,
    /// Iteration waiting for a fine-tuned endpoint, if any.
    pub awaiting: Option<u32>,
    pub failed_videos: Vec<(String, String)>,
    pub status: Status,
}

fn generator(
    section: &ModelConfig,
    videos: &[Video],
    rt: &Runtime,
    cfg: &RunConfig,
) -> Result<Arc<dyn ChatModel>> {
    match section.kind {
        ModelKind::Sim => {
            let id = if section.model.is_empty() {
                "sim"
            } else {
                &section.model
            };
            Ok(Arc::new(SimulatedVideoModel::new(id, videos.to_vec())))
        }
        _ => chat_model(section, rt, open_cache(cfg)?.as_ref()),
    }
}

pub fn synth_command(cfg: &RunConfig, rt: &Runtime, opts: &SynthOptions) -> Result<SynthOutcome> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    if let Some(g) = &opts.generator {
        cfg.synth.generator = g.clone();
    }
    cfg.validate_generator()?;
    let videos_path = cfg
        .synth
        .videos
        .as_ref()
        .ok_or_else(|| usage("synth.videos must be set"))?;
    let videos = load_videos(videos_path).map_err(|e| usage(e.to_string()))?;
    if videos.is_empty() {
        return Err(usage("no videos"));
    }
    let out_dir = cfg.out_dir.clone();
    let (start, total) = match &opts.resume {
        Some(path) => {
            let m = HandoffManifest::read(path).map_err(|e| usage(e.to_string()))?;
            m.verify().map_err(|e| usage(e.to_string()))?;
            match (m.status, m.next_iteration) {
                (HandoffStatus::AwaitingEndpoint, Some(next)) => (next, m.iterations_total),
                _ => {
                    return Err(usage(format!(
                        "{} has no pending iteration",
                        path.display()
                    )))
                }
            }
        }
        None => (0, cfg.synth.iterations),
    };
    let model = generator(&cfg.synth.generator, &videos, rt, &cfg)?;
    // Each invocation serves one iteration: the next one needs a model
    // fine-tuned on this one's dataset.
    let outcome = iterate(&videos, &cfg.pipeline(), total, start, &out_dir, |i| {
        (i == start).then(|| model.clone())
    })?;

    let mut manifest = RunManifest::new("synth", &cfg);
    let mut failed_videos = Vec::new();
    for report in &outcome.reports {
        manifest.record(&out_dir, &report.dataset_path)?;
        manifest.record(
            &out_dir,
            &realstream_harness::evo::export::stats_path(&report.dataset_path),
        )?;
        manifest.record(
            &out_dir,
            &realstream_harness::evo::iterate::manifest_path(&out_dir, report.iteration),
        )?;
        failed_videos.extend(report.failed.iter().cloned());
    }
    let status = if failed_videos.is_empty() {
        Status::Ok
    } else {
        Status::Partial
    };
    manifest.status = status;
    manifest.write(&out_dir)?;
    Ok(SynthOutcome {
        awaiting: outcome.paused_at,
        manifests: outcome.manifests,
        failed_videos,
        status,
    })
}

pub fn audit_command(
    cfg: &RunConfig,
    rt: &Runtime,
    dataset: &Path,
    n: Option<usize>,
) -> Result<AuditReport> {
    cfg.validate()?;
    let records = read_dataset(dataset).map_err(|e| usage(e.to_string()))?;
    let n = n.unwrap_or(cfg.audit.n).min(records.len());
    if n == 0 {
        return Err(usage("dataset is empty"));
    }
    let judge = if cfg.audit.use_judge {
        cfg.validate_judge()?;
        Some(chat_model(&cfg.judge, rt, open_cache(cfg)?.as_ref())?)
    } else {
        None
    };
    let report = audit(&records, n, cfg.seed, judge.as_deref()).context("auditing dataset")?;
    let path = cfg.out_dir.join("audit.json");
    write_file(&path, &serde_json::to_vec_pretty(&report)?)?;
    let mut manifest = RunManifest::new("audit", cfg);
    manifest.record(&cfg.out_dir, &path)?;
    manifest.write(&cfg.out_dir)?;
    Ok(report)
}
