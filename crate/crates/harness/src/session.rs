//! Frame-level streaming session driver.
//!
//! Turn `t` sees frames `1..=t`, the queries issued up to `t` and its own
//! earlier actions, nothing else. Backends get that view through
//! [`TurnContext`], which refuses to hand out later frames.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use realstream_core::timeline::{write_trajectory_log, TurnMeta};
use realstream_core::{Action, StreamTimeline, Trajectory, Turn};

use crate::chat::{BackendError, ChatModel, ChatRequest, ContentPart, Message};
use crate::pool::{bounded_pool, map_ordered};

pub const DEFAULT_SYSTEM_PROMPT: &str = include_str!("../templates/session/system_prompt.txt");

/// Visual token budgets the backends are evaluated at.
pub const TOKEN_BUDGETS: [u32; 2] = [128, 768];

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("turn {turn} requested frame {requested}, which is not yet visible")]
    CausalityViolation { turn: Turn, requested: Turn },
    #[error("sample `{sample_id}` needs {turns} turns of context, cap is {cap}")]
    ContextOverflow {
        sample_id: String,
        turns: u32,
        cap: u32,
    },
    #[error("expected {expected} frame references, got {found}")]
    FrameCount { expected: usize, found: usize },
    #[error("backend error: {0}")]
    Backend(#[from] BackendError),
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// What a backend may see at one turn.
#[derive(Debug, Clone, Copy)]
pub struct TurnContext<'a> {
    turn: Turn,
    /// Frames `1..=turn` only.
    frames: &'a [String],
    timeline: &'a StreamTimeline,
    history: &'a [Action],
}

impl<'a> TurnContext<'a> {
    pub fn turn(&self) -> Turn {
        self.turn
    }

    pub fn sample_id(&self) -> &str {
        self.timeline.sample_id()
    }

    /// Frame reference at 1-based `t`; only `t <= turn` is visible.
    pub fn frame(&self, t: Turn) -> Result<&'a str, SessionError> {
        if t == 0 || t > self.turn {
            return Err(SessionError::CausalityViolation {
                turn: self.turn,
                requested: t,
            });
        }
        Ok(&self.frames[(t - 1) as usize])
    }

    pub fn visible_frames(&self) -> &'a [String] {
        self.frames
    }

    pub fn current_frame(&self) -> &'a str {
        &self.frames[(self.turn - 1) as usize]
    }

    /// Query issued at `t`, if `t` is visible.
    pub fn query_at(&self, t: Turn) -> Option<&'a str> {
        (t <= self.turn)
            .then(|| self.timeline.query_at(t))
            .flatten()
    }

    pub fn current_query(&self) -> Option<&'a str> {
        self.query_at(self.turn)
    }

    pub fn visible_queries(&self) -> impl Iterator<Item = (Turn, &'a str)> {
        self.timeline
            .queries()
            .range(..=self.turn)
            .map(|(&t, q)| (t, q.as_str()))
    }

    /// Actions of turns `1..turn`.
    pub fn history(&self) -> &'a [Action] {
        self.history
    }
}

/// Raw backend output for one turn.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnOutput {
    pub raw: String,
    pub completion_tokens: Option<u32>,
    /// Request payload, recorded in the transcript.
    pub request: Value,
}

pub trait SessionBackend: Send + Sync {
    fn id(&self) -> &str;

    /// Stable digest of everything that affects the backend's behaviour.
    fn fingerprint(&self) -> String;

    fn act(&self, ctx: &TurnContext<'_>) -> Result<TurnOutput, SessionError>;
}

impl<B: SessionBackend + ?Sized> SessionBackend for Arc<B> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }

    fn act(&self, ctx: &TurnContext<'_>) -> Result<TurnOutput, SessionError> {
        (**self).act(ctx)
    }
}

fn digest(value: &Value) -> String {
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationParams {
    pub max_tokens: u32,
    pub temperature: f32,
    /// Visual tokens per frame the serving side is configured for. Recorded
    /// for provenance; the wire request carries only frame references.
    pub tokens_per_frame: u32,
    pub system_prompt: String,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            max_tokens: 512,
            temperature: 0.0,
            tokens_per_frame: 768,
            system_prompt: DEFAULT_SYSTEM_PROMPT.to_string(),
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), SessionError> {
        if !TOKEN_BUDGETS.contains(&self.tokens_per_frame) {
            return Err(SessionError::Config(format!(
                "tokens_per_frame must be one of {TOKEN_BUDGETS:?}, got {}",
                self.tokens_per_frame
            )));
        }
        Ok(())
    }
}

/// Builds the chat history for turn `t`: system prompt, then for every
/// visible turn a user message holding its frame (plus the query issued
/// then) followed by the assistant's recorded action for earlier turns.
pub fn build_request(ctx: &TurnContext<'_>, params: &GenerationParams) -> ChatRequest {
    let mut messages = vec![Message::system(params.system_prompt.clone())];
    for t in 1..=ctx.turn() {
        let mut parts = vec![ContentPart::image(ctx.frames[(t - 1) as usize].clone())];
        if let Some(q) = ctx.query_at(t) {
            parts.push(ContentPart::text(q));
        }
        messages.push(Message::user_parts(parts));
        if t < ctx.turn() {
            messages.push(Message::assistant(
                ctx.history()[(t - 1) as usize].rendered(),
            ));
        }
    }
    ChatRequest::new(messages)
        .with_max_tokens(params.max_tokens)
        .with_temperature(params.temperature)
}

/// Drives a chat-completions model.
pub struct ChatModelBackend<M> {
    model: M,
    params: GenerationParams,
    fingerprint: String,
}

impl<M: ChatModel> ChatModelBackend<M> {
    pub fn new(model: M, params: GenerationParams) -> Result<Self, SessionError> {
        params.validate()?;
        let fingerprint = digest(&json!({
            "kind": "http-chat",
            "model": model.id(),
            "params": params,
        }));
        Ok(ChatModelBackend {
            model,
            params,
            fingerprint,
        })
    }

    pub fn params(&self) -> &GenerationParams {
        &self.params
    }
}

impl<M: ChatModel> SessionBackend for ChatModelBackend<M> {
    fn id(&self) -> &str {
        self.model.id()
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn act(&self, ctx: &TurnContext<'_>) -> Result<TurnOutput, SessionError> {
        let request = build_request(ctx, &self.params);
        let wire = request.to_wire(self.model.id());
        let reply = self.model.complete(&request)?;
        Ok(TurnOutput {
            raw: reply.content,
            completion_tokens: reply.completion_tokens,
            request: wire,
        })
    }
}

type Program = dyn Fn(&TurnContext<'_>) -> Result<String, SessionError> + Send + Sync;

/// Deterministic backend running a program over the visible context.
#[derive(Clone)]
pub struct ScriptedBackend {
    id: String,
    program: Arc<Program>,
}

impl ScriptedBackend {
    pub fn new(
        id: impl Into<String>,
        program: impl Fn(&TurnContext<'_>) -> Result<String, SessionError> + Send + Sync + 'static,
    ) -> Self {
        ScriptedBackend {
            id: id.into(),
            program: Arc::new(program),
        }
    }

    pub fn silent() -> Self {
        ScriptedBackend::new("scripted:silent", |_| Ok(String::new()))
    }

    /// Answers `reply` at every turn that carries a query.
    pub fn respond_on_query(reply: impl Into<String>) -> Self {
        let reply = reply.into();
        ScriptedBackend::new(format!("scripted:on-query:{reply}"), move |ctx| {
            Ok(if ctx.current_query().is_some() {
                reply.clone()
            } else {
                String::new()
            })
        })
    }

    /// Fixed replies at fixed turns, silent elsewhere.
    pub fn respond_at(replies: impl IntoIterator<Item = (Turn, String)>) -> Self {
        let replies: std::collections::BTreeMap<Turn, String> = replies.into_iter().collect();
        let id = format!("scripted:at:{}", serde_json::to_string(&replies).unwrap());
        ScriptedBackend::new(id, move |ctx| {
            Ok(replies.get(&ctx.turn()).cloned().unwrap_or_default())
        })
    }

    /// Responds once, at the first turn whose frame satisfies `evidence`.
    pub fn first_evidence(
        reply: impl Into<String>,
        evidence: impl Fn(&str) -> bool + Send + Sync + 'static,
    ) -> Self {
        let reply = reply.into();
        ScriptedBackend::new(format!("scripted:first-evidence:{reply}"), move |ctx| {
            let seen_before = ctx.history().iter().any(Action::is_respond);
            Ok(if !seen_before && evidence(ctx.current_frame()) {
                reply.clone()
            } else {
                String::new()
            })
        })
    }
}

impl SessionBackend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn fingerprint(&self) -> String {
        digest(&json!({"kind": "scripted", "id": self.id}))
    }

    fn act(&self, ctx: &TurnContext<'_>) -> Result<TurnOutput, SessionError> {
        let raw = (self.program)(ctx)?;
        Ok(TurnOutput {
            raw,
            completion_tokens: None,
            request: json!({
                "frames": ctx.visible_frames(),
                "queries": ctx.visible_queries().collect::<Vec<_>>(),
            }),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub sample_id: String,
    pub turn: Turn,
    pub request: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionRecord {
    pub sample_id: String,
    pub trajectory: Trajectory,
    pub transcript: Vec<TranscriptEntry>,
    pub backend_fingerprint: String,
}

impl SessionRecord {
    pub fn failed_turns(&self) -> usize {
        self.trajectory.failed_turns()
    }

    /// Writes `<dir>/<sample>.trajectory.jsonl` and the transcript sidecar
    /// `<dir>/<sample>.transcript.jsonl`.
    pub fn persist(&self, timeline: &StreamTimeline, dir: &Path) -> io::Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let stem = sanitize(&self.sample_id);
        let traj_path = dir.join(format!("{stem}.trajectory.jsonl"));
        let mut out = BufWriter::new(File::create(&traj_path)?);
        write_trajectory_log(&mut out, &self.trajectory, Some(timeline))?;
        out.flush()?;
        let transcript_path = dir.join(format!("{stem}.transcript.jsonl"));
        let mut out = BufWriter::new(File::create(&transcript_path)?);
        for entry in &self.transcript {
            serde_json::to_writer(&mut out, entry)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok((traj_path, transcript_path))
    }
}

pub fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SessionOptions {
    /// Hard cap on turns of history; longer samples are refused.
    pub max_context_turns: Option<u32>,
}

/// Runs one sample turn by turn. Backend failures become silent turns
/// flagged as failed; causality and configuration errors abort.
pub fn run_session(
    timeline: &StreamTimeline,
    frames: &[String],
    backend: &dyn SessionBackend,
    options: SessionOptions,
) -> Result<SessionRecord, SessionError> {
    let turns = timeline.turn_count();
    if frames.len() != turns as usize {
        return Err(SessionError::FrameCount {
            expected: turns as usize,
            found: frames.len(),
        });
    }
    if let Some(cap) = options.max_context_turns {
        if turns > cap {
            return Err(SessionError::ContextOverflow {
                sample_id: timeline.sample_id().to_string(),
                turns,
                cap,
            });
        }
    }
    let mut actions: Vec<Action> = Vec::with_capacity(turns as usize);
    let mut meta = Vec::with_capacity(turns as usize);
    let mut transcript = Vec::with_capacity(turns as usize);
    for turn in 1..=turns {
        let ctx = TurnContext {
            turn,
            frames: &frames[..turn as usize],
            timeline,
            history: &actions,
        };
        let started = Instant::now();
        let (action, entry, failed) = match backend.act(&ctx) {
            Ok(out) => (
                Action::from_output(&out.raw, out.completion_tokens),
                TranscriptEntry {
                    sample_id: timeline.sample_id().to_string(),
                    turn,
                    request: out.request,
                    raw_output: Some(out.raw),
                    error: None,
                },
                false,
            ),
            Err(SessionError::Backend(e)) => {
                log::warn!(
                    "{} turn {turn}: {e}; recording silence",
                    timeline.sample_id()
                );
                (
                    Action::silent(),
                    TranscriptEntry {
                        sample_id: timeline.sample_id().to_string(),
                        turn,
                        request: Value::Null,
                        raw_output: None,
                        error: Some(e.to_string()),
                    },
                    true,
                )
            }
            Err(e) => return Err(e),
        };
        actions.push(action);
        meta.push(TurnMeta {
            backend_id: Some(backend.id().to_string()),
            wall_time_ms: Some(started.elapsed().as_millis() as u64),
            failed,
        });
        transcript.push(entry);
    }
    let mut trajectory = Trajectory::new(timeline.sample_id(), actions);
    trajectory.meta = meta;
    Ok(SessionRecord {
        sample_id: timeline.sample_id().to_string(),
        trajectory,
        transcript,
        backend_fingerprint: backend.fingerprint(),
    })
}

/// One sample to run.
#[derive(Debug, Clone)]
pub struct SessionJob {
    pub timeline: StreamTimeline,
    pub frames: Vec<String>,
}

/// Runs independent sessions on at most `parallelism` workers; results
/// keep the job order.
pub fn run_sessions(
    jobs: &[SessionJob],
    backend: &dyn SessionBackend,
    options: SessionOptions,
    parallelism: usize,
) -> Vec<Result<SessionRecord, SessionError>> {
    let pool = bounded_pool(parallelism);
    map_ordered(&pool, jobs, |job| {
        run_session(&job.timeline, &job.frames, backend, options)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chat::{ChatReply, ScriptedChatModel, TransportError, TransportErrorKind};
    use realstream_core::{GroundTruthSpec, Mode, Reference, Subtask};

    fn timeline(t: u32, queries: &[(Turn, &str)]) -> StreamTimeline {
        StreamTimeline::new(
            "s",
            0.5,
            t,
            queries.iter().map(|&(t, q)| (t, q.to_string())).collect(),
            GroundTruthSpec {
                mode: Mode::RealTimePerception,
                subtask: Subtask::Ojr,
                gt_timestamps: [1].into_iter().collect(),
                references: [(1, Reference::answer("x"))].into_iter().collect(),
                delta: None,
                options: None,
                question: None,
                activity: None,
            },
        )
        .unwrap()
    }

    fn frames(t: u32) -> Vec<String> {
        (1..=t).map(|i| format!("frame://{i}")).collect()
    }

    fn kinds(traj: &Trajectory) -> String {
        traj.turns
            .iter()
            .map(|a| if a.is_respond() { 'R' } else { 'S' })
            .collect()
    }

    #[test]
    fn scripted_echo() {
        let backend = ScriptedBackend::respond_at([(3, "A".to_string())]);
        let rec = run_session(
            &timeline(5, &[]),
            &frames(5),
            &backend,
            SessionOptions::default(),
        )
        .unwrap();
        assert_eq!(kinds(&rec.trajectory), "SSRSS");
        assert_eq!(rec.trajectory.turns[2].text(), Some("A"));
        assert_eq!(rec.transcript.len(), 5);
    }

    #[test]
    fn peeking_ahead_is_a_violation() {
        let backend =
            ScriptedBackend::new("peek", |ctx| ctx.frame(ctx.turn() + 1).map(str::to_string));
        let err = run_session(
            &timeline(4, &[]),
            &frames(4),
            &backend,
            SessionOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            SessionError::CausalityViolation {
                turn: 1,
                requested: 2
            }
        ));
    }

    #[test]
    fn respond_on_query_and_silent() {
        let tl = timeline(6, &[(2, "what?"), (5, "now?")]);
        let rec = run_session(
            &tl,
            &frames(6),
            &ScriptedBackend::respond_on_query("ok"),
            SessionOptions::default(),
        )
        .unwrap();
        assert_eq!(kinds(&rec.trajectory), "SRSSRS");
        let rec = run_session(
            &tl,
            &frames(6),
            &ScriptedBackend::silent(),
            SessionOptions::default(),
        )
        .unwrap();
        assert_eq!(kinds(&rec.trajectory), "SSSSSS");
    }

    #[test]
    fn first_evidence_program() {
        let f: Vec<String> = ["a", "b", "cup", "cup", "d"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let backend = ScriptedBackend::first_evidence("a cup", |frame| frame.contains("cup"));
        let rec = run_session(&timeline(5, &[]), &f, &backend, SessionOptions::default()).unwrap();
        assert_eq!(kinds(&rec.trajectory), "SSRSS");
    }

    #[test]
    fn chat_requests_are_causal_and_normalized() {
        let seen = Arc::new(std::sync::Mutex::new(Vec::new()));
        let s = seen.clone();
        let model = ScriptedChatModel::new("m", move |req: &ChatRequest| {
            let urls: Vec<String> = req.media_urls().iter().map(|u| u.to_string()).collect();
            s.lock().unwrap().push((urls, req.messages.len()));
            if req.media_urls().len() == 2 {
                "  <SILENT> ".into()
            } else {
                "hello".into()
            }
        });
        let backend = ChatModelBackend::new(model, GenerationParams::default()).unwrap();
        let tl = timeline(3, &[(2, "q?")]);
        let rec = run_session(&tl, &frames(3), &backend, SessionOptions::default()).unwrap();
        assert_eq!(kinds(&rec.trajectory), "RSR");
        let seen = seen.lock().unwrap();
        for (t, (urls, n_messages)) in seen.iter().enumerate() {
            let t = t + 1;
            assert_eq!(urls.len(), t);
            assert_eq!(urls[t - 1], format!("frame://{t}"));
            // system + t user + (t - 1) assistant
            assert_eq!(*n_messages, 2 * t);
        }
        let wire = &rec.transcript[2].request;
        assert_eq!(wire["messages"][4]["content"], "<silent>");
    }

    struct Flaky;

    impl ChatModel for Flaky {
        fn id(&self) -> &str {
            "flaky"
        }

        fn complete(&self, req: &ChatRequest) -> Result<ChatReply, BackendError> {
            if req.media_urls().len() == 2 {
                Err(BackendError::Transport {
                    attempts: 3,
                    last: TransportError::new(TransportErrorKind::Timeout, "timed out"),
                })
            } else {
                Ok(ChatReply::text("seen"))
            }
        }
    }

    #[test]
    fn backend_failure_records_flagged_silence() {
        let backend = ChatModelBackend::new(Flaky, GenerationParams::default()).unwrap();
        let rec = run_session(
            &timeline(3, &[]),
            &frames(3),
            &backend,
            SessionOptions::default(),
        )
        .unwrap();
        assert_eq!(kinds(&rec.trajectory), "RSR");
        assert!(rec.trajectory.meta[1].failed);
        assert_eq!(rec.failed_turns(), 1);
        assert!(rec.transcript[1]
            .error
            .as_deref()
            .unwrap()
            .contains("timed out"));
    }

    #[test]
    fn context_cap_and_frame_count() {
        let err = run_session(
            &timeline(10, &[]),
            &frames(10),
            &ScriptedBackend::silent(),
            SessionOptions {
                max_context_turns: Some(8),
            },
        )
        .unwrap_err();
        assert!(matches!(
            err,
            SessionError::ContextOverflow {
                turns: 10,
                cap: 8,
                ..
            }
        ));
        let err = run_session(
            &timeline(3, &[]),
            &frames(2),
            &ScriptedBackend::silent(),
            SessionOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            SessionError::FrameCount {
                expected: 3,
                found: 2
            }
        ));
    }

    #[test]
    fn token_budget_is_validated() {
        let params = GenerationParams {
            tokens_per_frame: 256,
            ..GenerationParams::default()
        };
        assert!(
            ChatModelBackend::new(ScriptedChatModel::new("m", |_| String::new()), params).is_err()
        );
    }

    #[test]
    fn persisted_logs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tl = timeline(4, &[(2, "q")]);
        let rec = run_session(
            &tl,
            &frames(4),
            &ScriptedBackend::respond_on_query("yes"),
            SessionOptions::default(),
        )
        .unwrap();
        let (traj_path, transcript_path) = rec.persist(&tl, dir.path()).unwrap();
        let back = realstream_core::timeline::read_trajectory_log(io::BufReader::new(
            File::open(traj_path).unwrap(),
        ))
        .unwrap();
        assert_eq!(back[0].turns, rec.trajectory.turns);
        let lines = fs::read_to_string(transcript_path).unwrap();
        assert_eq!(lines.lines().count(), 4);
    }

    #[test]
    fn parallel_sessions_keep_order() {
        let jobs: Vec<SessionJob> = (1..=6)
            .map(|t| SessionJob {
                timeline: timeline(t, &[]),
                frames: frames(t),
            })
            .collect();
        let out = run_sessions(
            &jobs,
            &ScriptedBackend::respond_at([(1, "x".into())]),
            SessionOptions::default(),
            3,
        );
        let lens: Vec<usize> = out
            .iter()
            .map(|r| r.as_ref().unwrap().trajectory.len())
            .collect();
        assert_eq!(lens, vec![1, 2, 3, 4, 5, 6]);
    }
}
