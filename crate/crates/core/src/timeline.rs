//! Stream timelines, actions and trajectories.
//!
//! Turn indices are 1-based and are the only unit of time: one turn is one
//! frame at the configured fps. Wall-clock time only ever appears as
//! per-turn metadata.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use num_rational::Rational64;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::task::{Mode, Subtask};

pub type Turn = u32;

pub const FORMAT_VERSION: u32 = 1;
pub const SILENT_MARKER: &str = "<silent>";
pub const DEFAULT_FPS: f64 = 0.5;
/// Matching tolerance for forward-active samples whose ground truth omits one.
pub const DEFAULT_FAR_DELTA: u32 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reference {
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
}

impl Reference {
    pub fn answer(answer: impl Into<String>) -> Self {
        Reference {
            answer: answer.into(),
            count: None,
            stage: None,
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ReferenceRepr {
    Text(String),
    Full(Reference),
}

fn de_references<'de, D>(d: D) -> std::result::Result<BTreeMap<Turn, Reference>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    let raw = BTreeMap::<Turn, ReferenceRepr>::deserialize(d)?;
    Ok(raw
        .into_iter()
        .map(|(t, r)| {
            let r = match r {
                ReferenceRepr::Text(answer) => Reference::answer(answer),
                ReferenceRepr::Full(r) => r,
            };
            (t, r)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthSpec {
    pub mode: Mode,
    pub subtask: Subtask,
    pub gt_timestamps: BTreeSet<Turn>,
    #[serde(deserialize_with = "de_references")]
    pub references: BTreeMap<Turn, Reference>,
    /// Turn tolerance. Forced to 0 outside forward-active mode; when absent
    /// for forward-active samples the run's default applies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    /// Question text shown to the judge when it differs from the injected query.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    /// Activity being counted, for repetition-counting samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activity: Option<String>,
}

impl GroundTruthSpec {
    pub fn effective_delta(&self, far_default: u32) -> u32 {
        match self.mode {
            Mode::ForwardActive => self.delta.unwrap_or(far_default),
            _ => 0,
        }
    }

    fn validate(&self, turn_count: u32) -> Result<()> {
        if self.subtask.mode() != self.mode {
            return Err(CoreError::invalid(format!(
                "subtask {} does not belong to mode {}",
                self.subtask,
                self.mode.short_name()
            )));
        }
        if self.gt_timestamps.is_empty() {
            return Err(CoreError::invalid("gt_timestamps must be nonempty"));
        }
        if let Some(&t) = self
            .gt_timestamps
            .iter()
            .find(|&&t| t == 0 || t > turn_count)
        {
            return Err(CoreError::invalid(format!(
                "ground-truth turn {t} outside [1, {turn_count}]"
            )));
        }
        if self.mode != Mode::ForwardActive && self.delta.is_some_and(|d| d != 0) {
            return Err(CoreError::invalid(format!(
                "delta must be 0 for {} samples",
                self.mode.short_name()
            )));
        }
        if let Some(t) = self
            .gt_timestamps
            .iter()
            .find(|t| !self.references.contains_key(t))
        {
            return Err(CoreError::invalid(format!(
                "ground-truth turn {t} has no reference answer"
            )));
        }
        Ok(())
    }
}

/// Per-sample schedule: turn count, query injection points, ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TimelineDoc", into = "TimelineDoc")]
pub struct StreamTimeline {
    sample_id: String,
    fps: f64,
    turn_count: u32,
    queries: BTreeMap<Turn, String>,
    ground_truth: GroundTruthSpec,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TimelineDoc {
    format_version: u32,
    sample_id: String,
    #[serde(default = "default_fps")]
    fps: f64,
    turn_count: u32,
    #[serde(default)]
    queries: BTreeMap<Turn, String>,
    ground_truth: GroundTruthSpec,
}

fn default_fps() -> f64 {
    DEFAULT_FPS
}

impl TryFrom<TimelineDoc> for StreamTimeline {
    type Error = CoreError;

    fn try_from(doc: TimelineDoc) -> Result<Self> {
        if doc.format_version != FORMAT_VERSION {
            return Err(CoreError::FormatVersion {
                found: doc.format_version,
                expected: FORMAT_VERSION,
            });
        }
        StreamTimeline::new(
            doc.sample_id,
            doc.fps,
            doc.turn_count,
            doc.queries,
            doc.ground_truth,
        )
    }
}

impl From<StreamTimeline> for TimelineDoc {
    fn from(t: StreamTimeline) -> Self {
        TimelineDoc {
            format_version: FORMAT_VERSION,
            sample_id: t.sample_id,
            fps: t.fps,
            turn_count: t.turn_count,
            queries: t.queries,
            ground_truth: t.ground_truth,
        }
    }
}

impl StreamTimeline {
    pub fn new(
        sample_id: impl Into<String>,
        fps: f64,
        turn_count: u32,
        queries: BTreeMap<Turn, String>,
        ground_truth: GroundTruthSpec,
    ) -> Result<Self> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(CoreError::invalid("fps must be positive"));
        }
        if turn_count == 0 {
            return Err(CoreError::invalid("turn_count must be at least 1"));
        }
        if let Some(&t) = queries.keys().find(|&&t| t == 0 || t > turn_count) {
            return Err(CoreError::invalid(format!(
                "query turn {t} outside [1, {turn_count}]"
            )));
        }
        ground_truth.validate(turn_count)?;
        Ok(StreamTimeline {
            sample_id: sample_id.into(),
            fps,
            turn_count,
            queries,
            ground_truth,
        })
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn turn_count(&self) -> u32 {
        self.turn_count
    }

    pub fn queries(&self) -> &BTreeMap<Turn, String> {
        &self.queries
    }

    pub fn query_at(&self, turn: Turn) -> Option<&str> {
        self.queries.get(&turn).map(String::as_str)
    }

    pub fn ground_truth(&self) -> &GroundTruthSpec {
        &self.ground_truth
    }

    pub fn mode(&self) -> Mode {
        self.ground_truth.mode
    }

    /// Logical stream time at the end of `turn`, in seconds.
    pub fn seconds_at(&self, turn: Turn) -> f64 {
        turn as f64 / self.fps
    }

    /// Question text the judge sees for ground-truth turn `gt_turn`: the
    /// explicit question if given, else the latest query at or before the
    /// turn, else the first query of the stream.
    pub fn question_for(&self, gt_turn: Turn) -> Option<&str> {
        if let Some(q) = &self.ground_truth.question {
            return Some(q);
        }
        self.queries
            .range(..=gt_turn)
            .next_back()
            .or_else(|| self.queries.iter().next())
            .map(|(_, q)| q.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Silent {
        completion_tokens: u32,
    },
    Respond {
        text: String,
        completion_tokens: u32,
    },
}

impl Action {
    pub fn silent() -> Self {
        Action::Silent {
            completion_tokens: 0,
        }
    }

    pub fn respond(text: impl Into<String>, completion_tokens: u32) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(CoreError::invalid("respond action requires non-empty text"));
        }
        Ok(Action::Respond {
            text,
            completion_tokens,
        })
    }

    /// Normalizes raw model output. Whitespace-only output and the silent
    /// marker (any case) become `Silent`; anything else responds with the
    /// trimmed text. Missing usage falls back to a whitespace token count.
    pub fn from_output(raw: &str, reported_tokens: Option<u32>) -> Self {
        let tokens = reported_tokens.unwrap_or_else(|| whitespace_tokens(raw));
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.eq_ignore_ascii_case(SILENT_MARKER) {
            Action::Silent {
                completion_tokens: tokens,
            }
        } else {
            Action::Respond {
                text: trimmed.to_string(),
                completion_tokens: tokens,
            }
        }
    }

    pub fn is_respond(&self) -> bool {
        matches!(self, Action::Respond { .. })
    }

    pub fn text(&self) -> Option<&str> {
        match self {
            Action::Respond { text, .. } => Some(text),
            Action::Silent { .. } => None,
        }
    }

    pub fn completion_tokens(&self) -> u32 {
        match self {
            Action::Silent { completion_tokens }
            | Action::Respond {
                completion_tokens, ..
            } => *completion_tokens,
        }
    }

    /// What the assistant said this turn, with silence rendered as the marker.
    pub fn rendered(&self) -> &str {
        self.text().unwrap_or(SILENT_MARKER)
    }
}

pub fn whitespace_tokens(text: &str) -> u32 {
    text.split_whitespace().count() as u32
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<u64>,
    /// Set when the backend failed and the turn was recorded as silence.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub failed: bool,
}

/// The model's causal action sequence, one action per turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub sample_id: String,
    pub turns: Vec<Action>,
    /// Either empty or one entry per turn.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub meta: Vec<TurnMeta>,
}

impl Trajectory {
    pub fn new(sample_id: impl Into<String>, turns: Vec<Action>) -> Self {
        Trajectory {
            sample_id: sample_id.into(),
            turns,
            meta: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// Action at 1-based `turn`.
    pub fn action(&self, turn: Turn) -> Option<&Action> {
        (turn as usize)
            .checked_sub(1)
            .and_then(|i| self.turns.get(i))
    }

    pub fn failed_turns(&self) -> usize {
        self.meta.iter().filter(|m| m.failed).count()
    }

    pub fn total_tokens(&self) -> u64 {
        self.turns
            .iter()
            .map(|a| a.completion_tokens() as u64)
            .sum()
    }
}

/// Turn answer rate: responding turns over all turns, exactly.
pub fn answer_rate(traj: &Trajectory) -> Result<Rational64> {
    if traj.is_empty() {
        return Err(CoreError::invalid("answer rate of an empty trajectory"));
    }
    let responses = traj.turns.iter().filter(|a| a.is_respond()).count();
    Ok(Rational64::new(responses as i64, traj.len() as i64))
}

/// [`answer_rate`] evaluated in an arbitrary scalar type.
pub fn answer_rate_as<T: Scalar>(traj: &Trajectory) -> Result<T> {
    let r = answer_rate(traj)?;
    Ok(T::from_ratio(*r.numer(), *r.denom()))
}

/// Ascending 1-based indices of responding turns.
pub fn response_turns(traj: &Trajectory) -> Vec<Turn> {
    traj.turns
        .iter()
        .enumerate()
        .filter(|(_, a)| a.is_respond())
        .map(|(i, _)| i as Turn + 1)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Violation {
    Length { expected: u32, found: usize },
    EmptyResponse { turn: Turn },
    SampleId { expected: String, found: String },
    MetaLength { expected: usize, found: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub violations: Vec<Violation>,
}

impl AlignmentReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_alignment(timeline: &StreamTimeline, traj: &Trajectory) -> AlignmentReport {
    let mut violations = Vec::new();
    if traj.sample_id != timeline.sample_id {
        violations.push(Violation::SampleId {
            expected: timeline.sample_id.clone(),
            found: traj.sample_id.clone(),
        });
    }
    if traj.len() != timeline.turn_count as usize {
        violations.push(Violation::Length {
            expected: timeline.turn_count,
            found: traj.len(),
        });
    }
    if !traj.meta.is_empty() && traj.meta.len() != traj.len() {
        violations.push(Violation::MetaLength {
            expected: traj.len(),
            found: traj.meta.len(),
        });
    }
    for (i, action) in traj.turns.iter().enumerate() {
        if let Action::Respond { text, .. } = action {
            if text.trim().is_empty() {
                violations.push(Violation::EmptyResponse {
                    turn: i as Turn + 1,
                });
            }
        }
    }
    AlignmentReport { violations }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Silent,
    Respond,
}

/// One line of the trajectory log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnRecord {
    pub format_version: u32,
    pub sample_id: String,
    pub turn: Turn,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    pub action: ActionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_id: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub failed: bool,
}

impl TurnRecord {
    fn into_action(self) -> Action {
        match self.action {
            ActionKind::Silent => Action::Silent {
                completion_tokens: self
                    .completion_tokens
                    .unwrap_or_else(|| self.text.as_deref().map_or(0, whitespace_tokens)),
            },
            ActionKind::Respond => {
                Action::from_output(self.text.as_deref().unwrap_or(""), self.completion_tokens)
            }
        }
    }
}

/// Flattens a trajectory into log records; queries come from the timeline
/// when one is given.
pub fn to_turn_records(traj: &Trajectory, timeline: Option<&StreamTimeline>) -> Vec<TurnRecord> {
    traj.turns
        .iter()
        .enumerate()
        .map(|(i, action)| {
            let turn = i as Turn + 1;
            let meta = traj.meta.get(i);
            TurnRecord {
                format_version: FORMAT_VERSION,
                sample_id: traj.sample_id.clone(),
                turn,
                query: timeline.and_then(|t| t.query_at(turn)).map(str::to_string),
                action: if action.is_respond() {
                    ActionKind::Respond
                } else {
                    ActionKind::Silent
                },
                text: action.text().map(str::to_string),
                completion_tokens: Some(action.completion_tokens()),
                backend_id: meta.and_then(|m| m.backend_id.clone()),
                failed: meta.is_some_and(|m| m.failed),
            }
        })
        .collect()
}

/// Regroups log records into trajectories, in order of first appearance.
/// Each sample's turns must be exactly `1..=n`.
pub fn from_turn_records(records: Vec<TurnRecord>) -> Result<Vec<Trajectory>> {
    let mut order: Vec<String> = Vec::new();
    let mut grouped: BTreeMap<String, Vec<TurnRecord>> = BTreeMap::new();
    for rec in records {
        if rec.format_version != FORMAT_VERSION {
            return Err(CoreError::FormatVersion {
                found: rec.format_version,
                expected: FORMAT_VERSION,
            });
        }
        if !grouped.contains_key(&rec.sample_id) {
            order.push(rec.sample_id.clone());
        }
        grouped.entry(rec.sample_id.clone()).or_default().push(rec);
    }
    order
        .into_iter()
        .map(|id| {
            let mut recs = grouped.remove(&id).unwrap_or_default();
            recs.sort_by_key(|r| r.turn);
            for (i, r) in recs.iter().enumerate() {
                if r.turn as usize != i + 1 {
                    return Err(CoreError::Malformed(format!(
                        "sample {id}: expected turn {}, found {}",
                        i + 1,
                        r.turn
                    )));
                }
            }
            let has_meta = recs.iter().any(|r| r.backend_id.is_some() || r.failed);
            let mut meta = Vec::new();
            let mut turns = Vec::with_capacity(recs.len());
            for r in recs {
                if has_meta {
                    meta.push(TurnMeta {
                        backend_id: r.backend_id.clone(),
                        wall_time_ms: None,
                        failed: r.failed,
                    });
                }
                turns.push(r.into_action());
            }
            Ok(Trajectory {
                sample_id: id,
                turns,
                meta,
            })
        })
        .collect()
}

pub fn write_trajectory_log<W: Write>(
    mut out: W,
    traj: &Trajectory,
    timeline: Option<&StreamTimeline>,
) -> std::io::Result<()> {
    for rec in to_turn_records(traj, timeline) {
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trajectory_log<R: BufRead>(input: R) -> Result<Vec<Trajectory>> {
    let mut records = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(|e| CoreError::Malformed(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TurnRecord = serde_json::from_str(&line)
            .map_err(|e| CoreError::Malformed(format!("line {}: {e}", lineno + 1)))?;
        records.push(rec);
    }
    from_turn_records(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s() -> Action {
        Action::silent()
    }

    fn r(text: &str) -> Action {
        Action::respond(text, 1).unwrap()
    }

    fn gt(mode: Mode, subtask: Subtask, turns: &[Turn]) -> GroundTruthSpec {
        GroundTruthSpec {
            mode,
            subtask,
            gt_timestamps: turns.iter().copied().collect(),
            references: turns.iter().map(|&t| (t, Reference::answer("x"))).collect(),
            delta: None,
            options: None,
            question: None,
            activity: None,
        }
    }

    fn timeline(t: u32) -> StreamTimeline {
        StreamTimeline::new(
            "s1",
            0.5,
            t,
            BTreeMap::new(),
            gt(Mode::RealTimePerception, Subtask::Ocr, &[1]),
        )
        .unwrap()
    }

    #[test]
    fn answer_rate_examples() {
        let all_silent = Trajectory::new("a", vec![s(); 10]);
        assert_eq!(
            answer_rate(&all_silent).unwrap(),
            Rational64::from_integer(0)
        );
        let all_respond = Trajectory::new("a", vec![r("x"); 10]);
        assert_eq!(
            answer_rate(&all_respond).unwrap(),
            Rational64::from_integer(1)
        );
        let mut turns = vec![s(); 10];
        turns[1] = r("a");
        turns[4] = r("b");
        turns[9] = r("c");
        let three = Trajectory::new("a", turns);
        assert_eq!(answer_rate(&three).unwrap(), Rational64::new(3, 10));
        assert_eq!(answer_rate_as::<f64>(&three).unwrap(), 0.3);
    }

    #[test]
    fn answer_rate_rejects_empty() {
        assert!(matches!(
            answer_rate(&Trajectory::new("a", vec![])),
            Err(CoreError::InvalidInput(_))
        ));
    }

    #[test]
    fn response_turn_examples() {
        let t = Trajectory::new("a", vec![s(), r("x"), s(), r("y")]);
        assert_eq!(response_turns(&t), vec![2, 4]);
        assert!(response_turns(&Trajectory::new("a", vec![s(); 3])).is_empty());
        let t = Trajectory::new("a", vec![r("x"), r("y"), r("z")]);
        assert_eq!(response_turns(&t), vec![1, 2, 3]);
    }

    #[test]
    fn alignment_examples() {
        let tl = timeline(5);
        assert!(validate_alignment(&tl, &Trajectory::new("s1", vec![s(); 5])).is_ok());

        let short = validate_alignment(&tl, &Trajectory::new("s1", vec![s(); 4]));
        assert_eq!(
            short.violations,
            vec![Violation::Length {
                expected: 5,
                found: 4
            }]
        );

        let mut turns = vec![s(); 5];
        turns[2] = Action::Respond {
            text: "  ".into(),
            completion_tokens: 0,
        };
        let empty = validate_alignment(&tl, &Trajectory::new("s1", turns));
        assert_eq!(empty.violations, vec![Violation::EmptyResponse { turn: 3 }]);
    }

    #[test]
    fn normalization_of_outputs() {
        assert!(!Action::from_output("<silent>", None).is_respond());
        assert!(!Action::from_output("  <SILENT>\n", None).is_respond());
        assert!(!Action::from_output("   ", None).is_respond());
        let a = Action::from_output(" The cup is red. ", None);
        assert_eq!(a.text(), Some("The cup is red."));
        assert_eq!(a.completion_tokens(), 4);
        assert_eq!(Action::from_output("<silent>", None).completion_tokens(), 1);
        assert_eq!(Action::from_output("hi", Some(7)).completion_tokens(), 7);
        assert!(Action::respond("   ", 0).is_err());
    }

    #[test]
    fn timeline_invariants() {
        let bad_fps = StreamTimeline::new(
            "x",
            0.0,
            3,
            BTreeMap::new(),
            gt(Mode::RealTimePerception, Subtask::Ocr, &[1]),
        );
        assert!(bad_fps.is_err());
        let out_of_range = StreamTimeline::new(
            "x",
            0.5,
            3,
            BTreeMap::new(),
            gt(Mode::RealTimePerception, Subtask::Ocr, &[4]),
        );
        assert!(out_of_range.is_err());
        let mut delta = gt(Mode::BackwardTracing, Subtask::Epm, &[2]);
        delta.delta = Some(2);
        assert!(StreamTimeline::new("x", 0.5, 3, BTreeMap::new(), delta).is_err());
        let mut missing_ref = gt(Mode::ForwardActive, Subtask::Rec, &[2]);
        missing_ref.references.clear();
        assert!(StreamTimeline::new("x", 0.5, 3, BTreeMap::new(), missing_ref).is_err());
        let wrong_mode = gt(Mode::ForwardActive, Subtask::Ocr, &[1]);
        assert!(StreamTimeline::new("x", 0.5, 3, BTreeMap::new(), wrong_mode).is_err());
        let mut queries = BTreeMap::new();
        queries.insert(9, "q".to_string());
        assert!(StreamTimeline::new(
            "x",
            0.5,
            3,
            queries,
            gt(Mode::RealTimePerception, Subtask::Ocr, &[1])
        )
        .is_err());
    }

    #[test]
    fn effective_delta_rules() {
        let far = gt(Mode::ForwardActive, Subtask::Ssr, &[3]);
        assert_eq!(far.effective_delta(DEFAULT_FAR_DELTA), 5);
        let mut far2 = far.clone();
        far2.delta = Some(2);
        assert_eq!(far2.effective_delta(DEFAULT_FAR_DELTA), 2);
        let rt = gt(Mode::RealTimePerception, Subtask::Ocr, &[3]);
        assert_eq!(rt.effective_delta(DEFAULT_FAR_DELTA), 0);
    }

    #[test]
    fn timeline_json_round_trip_and_version() {
        let json = r#"{
            "format_version": 1,
            "sample_id": "ocr-1",
            "turn_count": 4,
            "queries": {"2": "What does the sign say?"},
            "ground_truth": {
                "mode": "RealTimePerception",
                "subtask": "OCR",
                "gt_timestamps": [2],
                "references": {"2": "STOP"}
            }
        }"#;
        let tl: StreamTimeline = serde_json::from_str(json).unwrap();
        assert_eq!(tl.fps(), DEFAULT_FPS);
        assert_eq!(tl.query_at(2), Some("What does the sign say?"));
        assert_eq!(tl.ground_truth().references[&2].answer, "STOP");
        assert_eq!(tl.seconds_at(2), 4.0);
        let back: StreamTimeline =
            serde_json::from_str(&serde_json::to_string(&tl).unwrap()).unwrap();
        assert_eq!(back, tl);

        let v2 = json.replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(serde_json::from_str::<StreamTimeline>(&v2).is_err());
    }

    #[test]
    fn question_lookup() {
        let mut queries = BTreeMap::new();
        queries.insert(3, "first".to_string());
        queries.insert(6, "second".to_string());
        let tl = StreamTimeline::new(
            "q",
            0.5,
            8,
            queries,
            gt(Mode::BackwardTracing, Subtask::Epm, &[6]),
        )
        .unwrap();
        assert_eq!(tl.question_for(7), Some("second"));
        assert_eq!(tl.question_for(4), Some("first"));
        assert_eq!(tl.question_for(1), Some("first"));
    }

    #[test]
    fn log_round_trip_with_queries() {
        let mut queries = BTreeMap::new();
        queries.insert(2, "what?".to_string());
        let tl = StreamTimeline::new(
            "s1",
            0.5,
            3,
            queries,
            gt(Mode::RealTimePerception, Subtask::Ocr, &[2]),
        )
        .unwrap();
        let mut traj = Trajectory::new("s1", vec![s(), r("red"), s()]);
        traj.meta = vec![
            TurnMeta::default(),
            TurnMeta {
                backend_id: Some("m".into()),
                ..Default::default()
            },
            TurnMeta {
                failed: true,
                ..Default::default()
            },
        ];
        let mut buf = Vec::new();
        write_trajectory_log(&mut buf, &traj, Some(&tl)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().nth(1).unwrap().contains("\"query\":\"what?\""));
        let back = read_trajectory_log(&buf[..]).unwrap();
        assert_eq!(back, vec![traj]);
    }

    #[test]
    fn log_ingestion_normalizes_silent_marker() {
        let line =
            r#"{"format_version":1,"sample_id":"a","turn":1,"action":"respond","text":"<silent>"}"#;
        let trajs = read_trajectory_log(line.as_bytes()).unwrap();
        assert!(!trajs[0].turns[0].is_respond());
    }

    #[test]
    fn log_rejects_gaps() {
        let lines = [
            r#"{"format_version":1,"sample_id":"a","turn":1,"action":"silent"}"#,
            r#"{"format_version":1,"sample_id":"a","turn":3,"action":"silent"}"#,
        ]
        .join("\n");
        assert!(matches!(
            read_trajectory_log(lines.as_bytes()),
            Err(CoreError::Malformed(_))
        ));
    }
}
