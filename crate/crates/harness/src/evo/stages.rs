//! The per-video stages: classification, self-questioning, segment
//! relevance annotation, question selection and causal roll-out.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::chat::{BackendError, ChatModel, ChatRequest, ContentPart, Message};
use crate::judge::first_json_with_key;
use crate::template::Template;

use super::category::TaskCategory;
use super::SILENT;

const CLASSIFY: &str = include_str!("../../templates/evo/classify.txt");
const B1: &str = include_str!("../../templates/evo/b1_questions.txt");
const B2: &str = include_str!("../../templates/evo/b2_annotate.txt");
const B3: &str = include_str!("../../templates/evo/b3_select.txt");
const B4: &str = include_str!("../../templates/evo/b4_decide.txt");

pub const DEFAULT_SEGMENT_SECONDS: f64 = 30.0;
pub const DEFAULT_CAPTION_CAP: usize = 40;
/// Segments whose captions seed question selection.
pub const SELECTION_SAMPLE_SEGMENTS: usize = 5;

/// `name@hash8` per stage template, recorded as dataset provenance.
pub fn prompt_fingerprints() -> Vec<String> {
    [
        ("classify", CLASSIFY),
        ("b1", B1),
        ("b2", B2),
        ("b3", B3),
        ("b4", B4),
    ]
    .iter()
    .map(|(n, t)| format!("{n}@{}", &super::export::content_hash(t.as_bytes())[..8]))
    .collect()
}

fn tmpl(name: &str, text: &'static str) -> Template {
    Template::new(name, text)
}

/// Synthetic ground truth for offline runs; see [`super::sim`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticScript {
    pub category: TaskCategory,
    #[serde(default)]
    pub description: String,
    pub questions: Vec<String>,
    /// Per question, the 1-based segments that carry evidence.
    pub evidence: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Video {
    pub video_id: String,
    pub uri: String,
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticScript>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// 1-based.
    pub index: u32,
    pub start_s: f64,
    pub end_s: f64,
    pub reference: String,
}

fn clock(s: f64) -> String {
    let total = s.round() as u64;
    format!("{}:{:02}", total / 60, total % 60)
}

impl Segment {
    pub fn time_range(&self) -> String {
        format!("{}-{}", clock(self.start_s), clock(self.end_s))
    }
}

impl Video {
    /// Uniform segmentation into `ceil(duration / len)` pieces, at least one.
    pub fn segments(&self, segment_seconds: f64) -> Vec<Segment> {
        let n = (self.duration_s / segment_seconds).ceil().max(1.0) as u32;
        (1..=n)
            .map(|i| {
                let start_s = (i - 1) as f64 * segment_seconds;
                let end_s = (i as f64 * segment_seconds).min(self.duration_s.max(start_s));
                Segment {
                    index: i,
                    start_s,
                    end_s,
                    reference: format!("{}#t={},{}", self.uri, start_s, end_s),
                }
            })
            .collect()
    }
}

fn ask(
    model: &dyn ChatModel,
    media: Option<ContentPart>,
    prompt: String,
) -> Result<String, BackendError> {
    let mut parts = Vec::new();
    parts.extend(media);
    parts.push(ContentPart::text(prompt));
    let request = ChatRequest::new(vec![Message::user_parts(parts)]).with_temperature(0.0);
    Ok(model.complete(&request)?.content)
}

pub fn classify_prompt() -> String {
    let list: Vec<String> = TaskCategory::ALL
        .iter()
        .map(|c| format!("- {} ({}): {}", c.name(), c.code(), c.clauses().objective))
        .collect();
    tmpl("classify", CLASSIFY)
        .render(&BTreeMap::from([("category_list", list.join("\n"))]))
        .expect("classify slots")
}

/// `Ok(None)` when two replies in a row name no category.
pub fn classify_video(
    video: &Video,
    model: &dyn ChatModel,
) -> Result<Option<TaskCategory>, BackendError> {
    let prompt = classify_prompt();
    for attempt in 0..2 {
        // The retry differs only in a trailing reminder, so it does not hit
        // the same cache entry as the first attempt.
        let text = if attempt == 0 {
            prompt.clone()
        } else {
            format!("{prompt}\nReply with exactly one of the five category names.")
        };
        let reply = ask(model, Some(ContentPart::video(video.uri.clone())), text)?;
        if let Some(c) = TaskCategory::find_in(&reply) {
            return Ok(Some(c));
        }
        log::debug!("{}: unparseable category reply {reply:?}", video.video_id);
    }
    Ok(None)
}

pub fn question_prompt(category: TaskCategory, max_k: usize) -> String {
    let c = category.clauses();
    tmpl("b1", B1)
        .render(&BTreeMap::from([
            ("video_skill", c.video_skill.clone()),
            ("category", format!("{} ({})", c.name, c.code)),
            ("question_instruction", c.question_instruction.clone()),
            ("max_questions", max_k.to_string()),
        ]))
        .expect("b1 slots")
}

fn q_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^\s*(?:[-*]\s*)?\**Q(\d+)\**\s*[:.)]\s*(.+?)\s*$").unwrap())
}

/// `Q<n>:` lines in order, deduplicated case-insensitively, at most `max_k`.
pub fn parse_questions(reply: &str, max_k: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for cap in q_line_re().captures_iter(reply) {
        let q = cap[2].trim().to_string();
        if q.is_empty() || out.iter().any(|o| o.to_lowercase() == q.to_lowercase()) {
            continue;
        }
        out.push(q);
        if out.len() == max_k {
            break;
        }
    }
    out
}

pub fn generate_questions(
    video: &Video,
    category: TaskCategory,
    model: &dyn ChatModel,
    max_k: usize,
) -> Result<Vec<String>, BackendError> {
    let reply = ask(
        model,
        Some(ContentPart::video(video.uri.clone())),
        question_prompt(category, max_k),
    )?;
    Ok(parse_questions(&reply, max_k))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relevance {
    #[serde(rename = "I")]
    Irrelevant,
    #[serde(rename = "R")]
    Relevant,
}

impl Relevance {
    pub fn is_relevant(self) -> bool {
        self == Relevance::Relevant
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub relevance: Relevance,
    /// Class or Yes/No label as the annotator wrote it.
    pub label: String,
    pub note: String,
}

/// Segments x questions grid. Question numbering follows `questions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceMatrix {
    pub questions: Vec<String>,
    pub segments: Vec<Segment>,
    /// `cells[t][k]` for segment `t + 1`, question `k + 1`.
    pub cells: Vec<Vec<Cell>>,
    /// Raw annotation line per segment, used as its caption.
    pub captions: Vec<String>,
    /// Segments whose reply could not be parsed.
    pub warnings: Vec<u32>,
}

impl RelevanceMatrix {
    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    pub fn question_count(&self) -> usize {
        self.questions.len()
    }

    pub fn row_relevant(&self, t: usize) -> bool {
        self.cells[t].iter().any(|c| c.relevance.is_relevant())
    }

    pub fn column_count(&self, k: usize) -> usize {
        self.cells
            .iter()
            .filter(|row| row[k].relevance.is_relevant())
            .count()
    }

    pub fn first_relevant(&self, k: usize) -> Option<usize> {
        self.cells
            .iter()
            .position(|row| row[k].relevance.is_relevant())
    }

    /// Drops all-irrelevant questions; returns the dropped question texts.
    pub fn drop_irrelevant_columns(&mut self) -> Vec<String> {
        let keep: Vec<bool> = (0..self.question_count())
            .map(|k| self.column_count(k) > 0)
            .collect();
        let mut dropped = Vec::new();
        let mut kept = Vec::new();
        for (q, &k) in self.questions.drain(..).zip(&keep) {
            if k {
                kept.push(q);
            } else {
                dropped.push(q);
            }
        }
        self.questions = kept;
        for row in &mut self.cells {
            let mut i = 0;
            row.retain(|_| {
                i += 1;
                keep[i - 1]
            });
        }
        self.captions = (0..self.segment_count())
            .map(|t| recaption(self, t))
            .collect();
        dropped
    }
}

fn annotation_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?im)^[ \t]*[-*]?[ \t]*\**Question[ \t]*(\d+)\**[ \t]*:[ \t]*\[?[ \t]*(yes|no|setup|reveal|post[- ]?reveal|n/?a)\b[ \t]*\]?[ \t]*(?:[-:][ \t]*)?(.*?)[ \t]*$")
            .unwrap()
    })
}

fn label_relevance(label: &str) -> Relevance {
    match label.to_ascii_lowercase().as_str() {
        "yes" | "setup" | "reveal" => Relevance::Relevant,
        l if l.starts_with("post") => Relevance::Relevant,
        _ => Relevance::Irrelevant,
    }
}

/// Parses one segment reply into `k` cells; `None` when no line parses.
pub fn parse_annotation(reply: &str, k: usize) -> Option<Vec<Cell>> {
    let mut cells: Vec<Option<Cell>> = vec![None; k];
    let mut any = false;
    for cap in annotation_re().captures_iter(reply) {
        let Ok(n) = cap[1].parse::<usize>() else {
            continue;
        };
        if n == 0 || n > k || cells[n - 1].is_some() {
            continue;
        }
        any = true;
        cells[n - 1] = Some(Cell {
            relevance: label_relevance(&cap[2]),
            label: cap[2].to_string(),
            note: cap[3].to_string(),
        });
    }
    any.then(|| {
        cells
            .into_iter()
            .map(|c| {
                c.unwrap_or(Cell {
                    relevance: Relevance::Irrelevant,
                    label: "No".into(),
                    note: String::new(),
                })
            })
            .collect()
    })
}

fn numbered(questions: &[String]) -> String {
    questions
        .iter()
        .enumerate()
        .map(|(i, q)| format!("Question {}: {q}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn annotation_prompt(
    category: TaskCategory,
    segment: &Segment,
    count: usize,
    questions: &[String],
) -> String {
    let c = category.clauses();
    tmpl("b2", B2)
        .render(&BTreeMap::from([
            ("segment_index", segment.index.to_string()),
            ("segment_count", count.to_string()),
            ("time_range", segment.time_range()),
            ("questions_text", numbered(questions)),
            ("category", format!("{} ({})", c.name, c.code)),
            ("annotation_target", c.annotation_target.clone()),
        ]))
        .expect("b2 slots")
}

fn caption_line(segment: &Segment, cells: &[Cell]) -> String {
    let body: Vec<String> = cells
        .iter()
        .enumerate()
        .map(|(k, c)| {
            if c.note.is_empty() {
                format!("Question {}: {}", k + 1, c.label)
            } else {
                format!("Question {}: {} - {}", k + 1, c.label, c.note)
            }
        })
        .collect();
    format!(
        "[segment {} | {}] {}",
        segment.index,
        segment.time_range(),
        body.join("; ")
    )
}

/// One annotation call per segment. Unparseable replies leave the row
/// irrelevant and are listed in `warnings`.
pub fn annotate_relevance(
    video: &Video,
    category: TaskCategory,
    segments: &[Segment],
    questions: &[String],
    model: &dyn ChatModel,
) -> Result<RelevanceMatrix, BackendError> {
    let k = questions.len();
    let mut cells = Vec::with_capacity(segments.len());
    let mut captions = Vec::with_capacity(segments.len());
    let mut warnings = Vec::new();
    for seg in segments {
        let prompt = annotation_prompt(category, seg, segments.len(), questions);
        let reply = ask(
            model,
            Some(ContentPart::video(seg.reference.clone())),
            prompt,
        )?;
        let row = parse_annotation(&reply, k).unwrap_or_else(|| {
            log::warn!(
                "{}: segment {} annotation unparseable",
                video.video_id,
                seg.index
            );
            warnings.push(seg.index);
            vec![
                Cell {
                    relevance: Relevance::Irrelevant,
                    label: "N/A".into(),
                    note: String::new(),
                };
                k
            ]
        });
        captions.push(caption_line(seg, &row));
        cells.push(row);
    }
    Ok(RelevanceMatrix {
        questions: questions.to_vec(),
        segments: segments.to_vec(),
        cells,
        captions,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    /// 0-based index into the matrix questions.
    pub index: usize,
    pub task_prompt: String,
    pub reasoning: String,
    /// True when the reply was unusable and the rule-based fallback chose.
    pub fallback: bool,
}

fn recaption(matrix: &RelevanceMatrix, t: usize) -> String {
    caption_line(&matrix.segments[t], &matrix.cells[t])
}

pub fn selection_prompt(category: TaskCategory, matrix: &RelevanceMatrix) -> String {
    let sample: Vec<String> = (0..matrix.segment_count().min(SELECTION_SAMPLE_SEGMENTS))
        .map(|t| recaption(matrix, t))
        .collect();
    tmpl("b3", B3)
        .render(&BTreeMap::from([
            ("task_type", category.name().to_string()),
            ("questions_text", numbered(&matrix.questions)),
            ("sample_captions", sample.join("\n")),
        ]))
        .expect("b3 slots")
}

/// Question with the most relevant cells, lowest index on ties.
pub fn fallback_selection(matrix: &RelevanceMatrix) -> usize {
    (0..matrix.question_count())
        .max_by_key(|&k| (matrix.column_count(k), std::cmp::Reverse(k)))
        .unwrap_or(0)
}

pub fn parse_selection(reply: &str, question_count: usize) -> Option<(usize, String, String)> {
    let map = first_json_with_key(reply, "selected_question_idx")?;
    let idx = match &map["selected_question_idx"] {
        Value::Number(n) => n.as_u64()?,
        Value::String(s) => s.trim().parse().ok()?,
        _ => return None,
    } as usize;
    if idx == 0 || idx > question_count {
        return None;
    }
    let text = |key: &str| {
        map.get(key)
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string()
    };
    Some((idx - 1, text("task_prompt"), text("reasoning")))
}

pub fn select_question(
    category: TaskCategory,
    matrix: &RelevanceMatrix,
    model: &dyn ChatModel,
) -> Result<Selection, BackendError> {
    let reply = ask(model, None, selection_prompt(category, matrix))?;
    Ok(match parse_selection(&reply, matrix.question_count()) {
        Some((index, task_prompt, reasoning)) => Selection {
            index,
            task_prompt,
            reasoning,
            fallback: false,
        },
        None => Selection {
            index: fallback_selection(matrix),
            task_prompt: String::new(),
            reasoning: String::new(),
            fallback: true,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationTurn {
    pub segment_refs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
    pub assistant: String,
    /// Whether any question had evidence in this segment.
    pub relevant: bool,
    /// Roll-out decision; absent when the segment was skipped unasked.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<bool>,
}

/// Decision prompt for segment `t` (0-based). Only captions of segments
/// `..=t` are included, at most `cap` of them.
pub fn decision_prompt(
    category: TaskCategory,
    matrix: &RelevanceMatrix,
    tracked: usize,
    t: usize,
    cap: usize,
    turns: &[ConversationTurn],
) -> String {
    let first = (t + 1).saturating_sub(cap);
    let captions: Vec<&str> = matrix.captions[first..=t]
        .iter()
        .map(String::as_str)
        .collect();
    let last_response = turns
        .iter()
        .rev()
        .find(|x| x.assistant != SILENT)
        .map_or("None".to_string(), |x| x.assistant.clone());
    let history: Vec<String> = turns
        .iter()
        .enumerate()
        .flat_map(|(i, x)| {
            let mut lines = Vec::new();
            if let Some(u) = &x.user {
                lines.push(format!("[segment {}] User: {u}", i + 1));
            }
            if x.assistant != SILENT {
                lines.push(format!("[segment {}] Assistant: {}", i + 1, x.assistant));
            }
            lines
        })
        .collect();
    let seg = &matrix.segments[t];
    tmpl("b4", B4)
        .render(&BTreeMap::from([
            ("task_type", category.name().to_string()),
            ("question_number", (tracked + 1).to_string()),
            ("question", matrix.questions[tracked].clone()),
            ("segment_index", seg.index.to_string()),
            ("timestamp", seg.time_range()),
            ("captions", captions.join("\n")),
            ("last_response", last_response),
            (
                "history",
                if history.is_empty() {
                    "None".to_string()
                } else {
                    history.join("\n")
                },
            ),
            ("response_rule", category.clauses().response_rule.clone()),
        ]))
        .expect("b4 slots")
}

/// `Some(text)` to respond, `None` for silence. Malformed replies are silence.
pub fn parse_decision(reply: &str) -> Option<String> {
    let map = first_json_with_key(reply, "should_respond")?;
    let respond = match &map["should_respond"] {
        Value::Bool(b) => *b,
        Value::String(s) => s.trim().eq_ignore_ascii_case("true"),
        _ => false,
    };
    if !respond {
        return None;
    }
    let text = map.get("response").and_then(Value::as_str)?.trim();
    (!text.is_empty() && !text.eq_ignore_ascii_case(SILENT)).then(|| text.to_string())
}

/// Turn at which the tracked question is put to the assistant (0-based).
pub fn query_turn(category: TaskCategory, matrix: &RelevanceMatrix, tracked: usize) -> usize {
    if category.injects_at_evidence() {
        matrix.first_relevant(tracked).unwrap_or(0)
    } else {
        0
    }
}

/// Causal roll-out over every segment.
pub fn rollout(
    category: TaskCategory,
    matrix: &RelevanceMatrix,
    selection: &Selection,
    model: &dyn ChatModel,
    caption_cap: usize,
) -> Result<Vec<ConversationTurn>, BackendError> {
    let tracked = selection.index;
    let query_at = query_turn(category, matrix, tracked);
    let query = if category.injects_at_evidence() || selection.task_prompt.trim().is_empty() {
        matrix.questions[tracked].clone()
    } else {
        selection.task_prompt.trim().to_string()
    };
    let mut turns: Vec<ConversationTurn> = Vec::with_capacity(matrix.segment_count());
    for t in 0..matrix.segment_count() {
        let user = (t == query_at).then(|| query.clone());
        let relevant = matrix.row_relevant(t);
        let (assistant, decision) = if relevant {
            let mut view = turns.clone();
            view.push(ConversationTurn {
                segment_refs: vec![],
                user: user.clone(),
                assistant: SILENT.to_string(),
                relevant,
                decision: None,
            });
            let prompt = decision_prompt(category, matrix, tracked, t, caption_cap, &view);
            match parse_decision(&ask(model, None, prompt)?) {
                Some(text) => (text, Some(true)),
                None => (SILENT.to_string(), Some(false)),
            }
        } else {
            (SILENT.to_string(), None)
        };
        turns.push(ConversationTurn {
            segment_refs: vec![matrix.segments[t].reference.clone()],
            user,
            assistant,
            relevant,
            decision,
        });
    }
    Ok(turns)
}
