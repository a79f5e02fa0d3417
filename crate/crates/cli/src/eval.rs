//! `eval`: sessions (or recorded logs), judging, scoring, aggregation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use realstream_core::report::{aggregate, BenchmarkReport, TokenStats};
use realstream_core::scoring::{score_sample, SampleScore};
use realstream_core::timeline::{read_trajectory_log, write_trajectory_log};
use realstream_core::{ScoringParams, StreamTimeline, Trajectory};
use realstream_harness::judge::{JudgeCall, JudgeClient};
use realstream_harness::session::{
    run_sessions, ChatModelBackend, ScriptedBackend, SessionBackend, SessionJob, SessionOptions,
};

use crate::bench::load_benchmark;
use crate::config::{usage, ModelKind, ReportFormat, RunConfig};
use crate::{chat_model, open_cache, write_file, RunManifest, Runtime, Status, Unreachable};

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Replay recorded trajectories instead of running sessions.
    pub from_logs: Option<PathBuf>,
    pub report_format: Option<ReportFormat>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleFailure {
    pub sample_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub model: String,
    pub judge: String,
    pub constants: BTreeMap<String, serde_json::Value>,
    pub report: BenchmarkReport<f64>,
    pub samples: Vec<SampleScore<f64>>,
    pub failures: Vec<SampleFailure>,
    pub failed_turns: usize,
    pub judge_transport_failures: usize,
    pub judge_parse_failures: usize,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub status: Status,
    pub out_dir: PathBuf,
}

fn session_backend(cfg: &RunConfig, rt: &Runtime) -> Result<Box<dyn SessionBackend>> {
    cfg.validate_backend()?;
    let backend: Box<dyn SessionBackend> = match cfg.backend.kind {
        ModelKind::ScriptedSilent => Box::new(ScriptedBackend::silent()),
        ModelKind::ScriptedOnQuery => {
            Box::new(ScriptedBackend::respond_on_query(cfg.backend.reply.clone()))
        }
        _ => {
            let cache = open_cache(cfg)?;
            let model = chat_model(&cfg.backend, rt, cache.as_ref())?;
            Box::new(
                ChatModelBackend::new(model, cfg.generation.generation())
                    .map_err(|e| usage(format!("generation: {e}")))?,
            )
        }
    };
    Ok(backend)
}

fn recorded(path: &Path) -> Result<BTreeMap<String, Trajectory>> {
    let file =
        File::open(path).map_err(|e| usage(format!("cannot read logs {}: {e}", path.display())))?;
    let trajs = read_trajectory_log(BufReader::new(file))
        .map_err(|e| usage(format!("invalid trajectory log {}: {e}", path.display())))?;
    Ok(trajs
        .into_iter()
        .map(|t| (t.sample_id.clone(), t))
        .collect())
}

/// Model id, one trajectory (or failure reason) per job, failed turn count.
type Produced = (String, Vec<Result<Trajectory, String>>, usize);

/// Trajectories in job order.
fn trajectories(
    cfg: &RunConfig,
    rt: &Runtime,
    jobs: &[SessionJob],
    opts: &EvalOptions,
    out_dir: &Path,
    manifest: &mut RunManifest,
) -> Result<Produced> {
    if let Some(logs) = &opts.from_logs {
        let mut by_id = recorded(logs)?;
        let out = jobs
            .iter()
            .map(|j| {
                by_id
                    .remove(j.timeline.sample_id())
                    .ok_or_else(|| "no recorded trajectory".to_string())
            })
            .collect();
        let model = logs
            .file_stem()
            .map_or("recorded".to_string(), |s| s.to_string_lossy().into_owned());
        return Ok((model, out, 0));
    }
    let backend = session_backend(cfg, rt)?;
    let options = SessionOptions {
        max_context_turns: cfg.generation.max_context_turns,
    };
    let results = run_sessions(jobs, backend.as_ref(), options, cfg.session_parallelism);
    let total_turns: usize = jobs.iter().map(|j| j.timeline.turn_count() as usize).sum();
    let mut failed_turns = 0;
    let mut log = Vec::new();
    let mut out = Vec::with_capacity(jobs.len());
    for (job, result) in jobs.iter().zip(results) {
        match result {
            Ok(record) => {
                failed_turns += record.failed_turns();
                let (a, b) = record
                    .persist(&job.timeline, &out_dir.join("sessions"))
                    .with_context(|| format!("persisting session {}", record.sample_id))?;
                manifest.record(out_dir, &a)?;
                manifest.record(out_dir, &b)?;
                write_trajectory_log(&mut log, &record.trajectory, Some(&job.timeline))?;
                out.push(Ok(record.trajectory));
            }
            Err(e) => {
                log::warn!("{}: {e}", job.timeline.sample_id());
                out.push(Err(e.to_string()));
            }
        }
    }
    if total_turns > 0 && failed_turns == total_turns {
        return Err(Unreachable(format!(
            "every turn of every sample failed against {}",
            backend.id()
        ))
        .into());
    }
    let path = out_dir.join("trajectories.jsonl");
    write_file(&path, &log)?;
    manifest.record(out_dir, &path)?;
    Ok((backend.id().to_string(), out, failed_turns))
}

pub fn eval_command(cfg: &RunConfig, rt: &Runtime, opts: &EvalOptions) -> Result<EvalOutcome> {
    cfg.validate()?;
    cfg.validate_judge()?;
    let bench = cfg
        .benchmark
        .as_ref()
        .ok_or_else(|| usage("benchmark must be set for eval"))?;
    let jobs = load_benchmark(bench)?;
    let out_dir = cfg.out_dir.clone();
    let mut manifest = RunManifest::new("eval", cfg);

    let (model_id, trajs, failed_turns) =
        trajectories(cfg, rt, &jobs, opts, &out_dir, &mut manifest)?;

    let cache = open_cache(cfg)?;
    // Judge verdicts are cached by the client itself, keyed on the prompt.
    let judge_model = chat_model(&cfg.judge, rt, None)?;
    let judge = JudgeClient::new(judge_model, cache, cfg.judge_settings());
    let params = ScoringParams {
        premature_penalty: cfg.premature_penalty,
        far_delta_default: cfg.far_delta,
    };

    let mut scores: Vec<(StreamTimeline, SampleScore<f64>)> = Vec::new();
    let mut failures = Vec::new();
    let mut judge_lines = Vec::new();
    let mut tokens = TokenStats::default();
    let (mut transport_failures, mut parse_failures, mut judge_calls) = (0, 0, 0);
    for (job, traj) in jobs.iter().zip(trajs) {
        let id = job.timeline.sample_id().to_string();
        let traj = match traj {
            Ok(t) => t,
            Err(reason) => {
                failures.push(SampleFailure {
                    sample_id: id,
                    reason,
                });
                continue;
            }
        };
        let judged = judge.judge_sample(&job.timeline, &traj);
        transport_failures += judged.transport_failures();
        parse_failures += judged.parse_failures();
        judge_calls += judged.calls.len();
        for call in &judged.calls {
            judge_lines.push(serde_json::to_string(&JudgeLine {
                sample_id: &id,
                call,
            })?);
        }
        match score_sample(&job.timeline, &traj, &judged.bundle, &params) {
            Ok(s) => {
                tokens.add(traj.total_tokens(), traj.len() as u64);
                scores.push((job.timeline.clone(), s));
            }
            Err(e) => failures.push(SampleFailure {
                sample_id: id,
                reason: e.to_string(),
            }),
        }
    }
    if judge_calls > 0 && transport_failures == judge_calls {
        return Err(Unreachable(format!(
            "judge {} answered none of {judge_calls} calls",
            judge.model_id()
        ))
        .into());
    }

    let report = aggregate(
        scores
            .iter()
            .map(|(t, s)| (t.ground_truth().subtask.code(), s)),
        tokens,
    )?;
    let report = EvalReport {
        model: model_id,
        judge: judge.model_id().to_string(),
        constants: manifest.constants.clone(),
        report,
        samples: scores.into_iter().map(|(_, s)| s).collect(),
        failures,
        failed_turns,
        judge_transport_failures: transport_failures,
        judge_parse_failures: parse_failures,
    };

    let judge_path = out_dir.join("judgements.jsonl");
    let mut body = judge_lines.join("\n");
    if !body.is_empty() {
        body.push('\n');
    }
    write_file(&judge_path, body.as_bytes())?;
    manifest.record(&out_dir, &judge_path)?;
    let format = opts.report_format.unwrap_or(cfg.report_format);
    if matches!(format, ReportFormat::Json | ReportFormat::Both) {
        let path = out_dir.join("report.json");
        let mut bytes = serde_json::to_vec_pretty(&report)?;
        bytes.push(b'\n');
        write_file(&path, &bytes)?;
        manifest.record(&out_dir, &path)?;
    }
    if matches!(format, ReportFormat::Table | ReportFormat::Both) {
        let path = out_dir.join("report.txt");
        write_file(&path, report.report.render_table(&report.model).as_bytes())?;
        manifest.record(&out_dir, &path)?;
    }
    let status =
        if report.failures.is_empty() && report.failed_turns == 0 && transport_failures == 0 {
            Status::Ok
        } else {
            Status::Partial
        };
    manifest.status = status;
    manifest.write(&out_dir)?;
    Ok(EvalOutcome {
        report,
        status,
        out_dir,
    })
}

#[derive(Serialize)]
struct JudgeLine<'a> {
    sample_id: &'a str,
    #[serde(flatten)]
    call: &'a JudgeCall,
}
