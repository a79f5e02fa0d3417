//! Offline stand-in for a video model. Videos carry a [`SyntheticScript`]
//! and the simulator answers each stage prompt from it, so the pipeline can
//! run end to end without a network.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde_json::json;

use crate::chat::{BackendError, ChatModel, ChatReply, ChatRequest};

use super::category::TaskCategory;
use super::stages::{SyntheticScript, Video};

#[derive(Debug, Clone)]
pub struct SimulatedVideoModel {
    id: String,
    /// Keyed by video uri.
    scripts: BTreeMap<String, SyntheticScript>,
}

fn re(cell: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).unwrap())
}

fn numbered_questions(text: &str) -> Vec<(usize, String)> {
    static RE: OnceLock<Regex> = OnceLock::new();
    re(&RE, r"(?m)^Question (\d+): (.+)$")
        .captures_iter(text)
        .map(|c| (c[1].parse().unwrap(), c[2].trim().to_string()))
        .collect()
}

impl SimulatedVideoModel {
    pub fn new(id: impl Into<String>, videos: impl IntoIterator<Item = Video>) -> Self {
        SimulatedVideoModel {
            id: id.into(),
            scripts: videos
                .into_iter()
                .filter_map(|v| v.synthetic.map(|s| (v.uri, s)))
                .collect(),
        }
    }

    fn by_uri(&self, request: &ChatRequest) -> Option<&SyntheticScript> {
        let url = request.media_urls().into_iter().next()?;
        let base = url.split("#t=").next().unwrap_or(url);
        self.scripts.get(base)
    }

    fn by_question(&self, text: &str) -> Option<&SyntheticScript> {
        let listed = numbered_questions(text);
        let tracked = tracked_question(text).map(|(_, q)| q);
        self.scripts.values().find(|s| {
            s.questions
                .iter()
                .any(|q| listed.iter().any(|(_, l)| l == q) || tracked.as_deref() == Some(q))
        })
    }

    fn reply(&self, request: &ChatRequest) -> String {
        let text = request.all_text();
        let first = text.lines().next().unwrap_or_default();
        if first.starts_with("Watch the whole video") {
            return self
                .by_uri(request)
                .map_or("unknown".into(), |s| s.category.name().to_string());
        }
        if first.starts_with("Role: You are an expert video analyst") {
            return self.by_uri(request).map_or(String::new(), questions_reply);
        }
        if first.starts_with("Input: A short video segment") {
            return self
                .by_uri(request)
                .map_or(String::new(), |s| annotation_reply(s, &text));
        }
        if first.starts_with("Role: You are selecting") {
            return self
                .by_question(&text)
                .map_or(String::new(), |s| selection_reply(s, &text));
        }
        if first.starts_with("Role: You are analyzing video segments") {
            return decision_reply(&text);
        }
        String::new()
    }
}

impl ChatModel for SimulatedVideoModel {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, BackendError> {
        Ok(ChatReply::text(self.reply(request)))
    }
}

fn questions_reply(s: &SyntheticScript) -> String {
    let mut out = if s.description.is_empty() {
        "The video shows a continuous scene.".to_string()
    } else {
        s.description.clone()
    };
    for (i, q) in s.questions.iter().enumerate() {
        out.push_str(&format!("\nQ{}: {q}", i + 1));
    }
    out
}

fn annotation_reply(s: &SyntheticScript, prompt: &str) -> String {
    static SEG: OnceLock<Regex> = OnceLock::new();
    let Some(seg) = re(&SEG, r"Segment (\d+) of")
        .captures(prompt)
        .and_then(|c| c[1].parse::<u32>().ok())
    else {
        return String::new();
    };
    let am = s.category == TaskCategory::AnticipatoryMonitoring;
    numbered_questions(prompt)
        .into_iter()
        .map(|(k, q)| {
            let hit = s
                .questions
                .iter()
                .position(|x| *x == q)
                .is_some_and(|i| s.evidence.get(i).is_some_and(|e| e.contains(&seg)));
            match (hit, am) {
                (true, false) => format!("- Question {k}: Yes - evidence in segment {seg}"),
                (true, true) => format!("- Question {k}: Reveal - state change in segment {seg}"),
                (false, false) => format!("- Question {k}: No - N/A"),
                (false, true) => format!("- Question {k}: N/A - N/A"),
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn selection_reply(s: &SyntheticScript, prompt: &str) -> String {
    let listed = numbered_questions(prompt);
    let weight = |q: &str| {
        s.questions
            .iter()
            .position(|x| x == q)
            .map_or(0, |i| s.evidence.get(i).map_or(0, Vec::len))
    };
    let best = listed
        .iter()
        .max_by_key(|(k, q)| (weight(q), std::cmp::Reverse(*k)))
        .cloned();
    match best {
        Some((k, q)) => json!({
            "selected_question_idx": k,
            "task_prompt": format!("Keep me posted: {q}"),
            "reasoning": "most segments with evidence",
        })
        .to_string(),
        None => "{}".into(),
    }
}

fn tracked_question(prompt: &str) -> Option<(usize, String)> {
    static RE: OnceLock<Regex> = OnceLock::new();
    re(&RE, r"(?m)^Tracked question (\d+): (.+)$")
        .captures(prompt)
        .map(|c| (c[1].parse().unwrap(), c[2].trim().to_string()))
}

/// Responds when the newest caption marks the tracked question relevant.
fn decision_reply(prompt: &str) -> String {
    static SEG: OnceLock<Regex> = OnceLock::new();
    let Some((k, _)) = tracked_question(prompt) else {
        return "no decision".into();
    };
    let Some(seg) = re(&SEG, r"Current timestamp: segment (\d+)")
        .captures(prompt)
        .map(|c| c[1].to_string())
    else {
        return "no decision".into();
    };
    let head = format!("[segment {seg} |");
    let marker_yes = format!("Question {k}: Yes");
    let marker_reveal = format!("Question {k}: Reveal");
    let caption_lines: Vec<&str> = prompt
        .lines()
        .filter(|l| l.starts_with("[segment ") && l.contains(" | "))
        .collect();
    let relevant_so_far = caption_lines
        .iter()
        .filter(|l| l.contains(&marker_yes) || l.contains(&marker_reveal))
        .count();
    let now = caption_lines
        .iter()
        .find(|l| l.starts_with(&head))
        .is_some_and(|l| l.contains(&marker_yes) || l.contains(&marker_reveal));
    if now {
        json!({
            "should_respond": true,
            "reason": "new evidence in the current segment",
            "response": format!("Update at segment {seg}: {relevant_so_far} relevant observation(s) so far."),
        })
        .to_string()
    } else {
        json!({"should_respond": false, "reason": "nothing new"}).to_string()
    }
}

/// Three small synthetic videos, one per broad category family.
pub fn demo_videos() -> Vec<Video> {
    let v = |id: &str, dur: f64, category, questions: &[&str], evidence: Vec<Vec<u32>>| Video {
        video_id: id.into(),
        uri: format!("file:///videos/{id}.mp4"),
        duration_s: dur,
        synthetic: Some(SyntheticScript {
            category,
            description: format!("Synthetic clip {id}."),
            questions: questions.iter().map(|q| q.to_string()).collect(),
            evidence,
        }),
    };
    vec![
        v(
            "jump_rope",
            150.0,
            TaskCategory::TemporalAggregation,
            &[
                "How many jumps does the person complete?",
                "What color is the rope?",
            ],
            vec![vec![1, 2, 4], vec![1]],
        ),
        v(
            "red_cup",
            95.0,
            TaskCategory::ImmediateVisual,
            &[
                "When does the red cup appear?",
                "Is there a dog?",
                "Where is the lamp?",
            ],
            vec![vec![3], vec![], vec![2]],
        ),
        v(
            "gift_box",
            240.0,
            TaskCategory::AnticipatoryMonitoring,
            &["What is inside the box?"],
            vec![vec![5, 6]],
        ),
    ]
}
