//! Judge prompt templates and verdict parsing.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::template::Template;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TemplateId {
    #[serde(rename = "C1-accuracy")]
    Accuracy,
    #[serde(rename = "C2-repetition")]
    Repetition,
    #[serde(rename = "C3-crr-intention")]
    CrrIntention,
    #[serde(rename = "C4-ssr-rec-intention")]
    SsrRecIntention,
    #[serde(rename = "C5-far-crr")]
    FarCrr,
    #[serde(rename = "C6-far-ssr")]
    FarSsr,
    #[serde(rename = "C7-far-rec")]
    FarRec,
}

const C1: &str = include_str!("../../templates/judge/c1_accuracy.txt");
const C2: &str = include_str!("../../templates/judge/c2_repetition.txt");
const C3: &str = include_str!("../../templates/judge/c3_crr_intention.txt");
const C4: &str = include_str!("../../templates/judge/c4_ssr_rec_intention.txt");
const C5: &str = include_str!("../../templates/judge/c5_far_crr.txt");
const C6: &str = include_str!("../../templates/judge/c6_far_ssr.txt");
const C7: &str = include_str!("../../templates/judge/c7_far_rec.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerdictKind {
    Correctness,
    Repetition,
    Intention,
    Consistency,
}

impl TemplateId {
    pub const ALL: [TemplateId; 7] = [
        TemplateId::Accuracy,
        TemplateId::Repetition,
        TemplateId::CrrIntention,
        TemplateId::SsrRecIntention,
        TemplateId::FarCrr,
        TemplateId::FarSsr,
        TemplateId::FarRec,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateId::Accuracy => "C1-accuracy",
            TemplateId::Repetition => "C2-repetition",
            TemplateId::CrrIntention => "C3-crr-intention",
            TemplateId::SsrRecIntention => "C4-ssr-rec-intention",
            TemplateId::FarCrr => "C5-far-crr",
            TemplateId::FarSsr => "C6-far-ssr",
            TemplateId::FarRec => "C7-far-rec",
        }
    }

    /// File name of the shipped template under `templates/judge/`.
    pub fn file_name(self) -> &'static str {
        match self {
            TemplateId::Accuracy => "c1_accuracy.txt",
            TemplateId::Repetition => "c2_repetition.txt",
            TemplateId::CrrIntention => "c3_crr_intention.txt",
            TemplateId::SsrRecIntention => "c4_ssr_rec_intention.txt",
            TemplateId::FarCrr => "c5_far_crr.txt",
            TemplateId::FarSsr => "c6_far_ssr.txt",
            TemplateId::FarRec => "c7_far_rec.txt",
        }
    }

    pub fn source(self) -> &'static str {
        match self {
            TemplateId::Accuracy => C1,
            TemplateId::Repetition => C2,
            TemplateId::CrrIntention => C3,
            TemplateId::SsrRecIntention => C4,
            TemplateId::FarCrr => C5,
            TemplateId::FarSsr => C6,
            TemplateId::FarRec => C7,
        }
    }

    pub fn template(self) -> &'static Template {
        static ALL: OnceLock<Vec<Template>> = OnceLock::new();
        let all = ALL.get_or_init(|| {
            TemplateId::ALL
                .iter()
                .map(|id| Template::new(id.name(), id.source()))
                .collect()
        });
        &all[self as usize]
    }

    pub fn kind(self) -> VerdictKind {
        match self {
            TemplateId::Accuracy => VerdictKind::Correctness,
            TemplateId::Repetition => VerdictKind::Repetition,
            TemplateId::CrrIntention | TemplateId::SsrRecIntention => VerdictKind::Intention,
            TemplateId::FarCrr | TemplateId::FarSsr | TemplateId::FarRec => {
                VerdictKind::Consistency
            }
        }
    }

    /// Admissible consistency scores, ascending.
    pub fn rubric(self) -> &'static [f64] {
        match self {
            TemplateId::FarCrr | TemplateId::FarRec => &[0.0, 0.3, 0.5],
            TemplateId::FarSsr => &[0.0, 0.2, 0.5],
            _ => &[],
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TemplateId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|id| id.name().eq_ignore_ascii_case(s) || id.name()[..2].eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown judge template `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VerdictValue {
    Correctness {
        correct: bool,
        reasoning: String,
    },
    Repetition {
        is_repeated: bool,
        reasoning: String,
    },
    Intention {
        yes: bool,
    },
    Consistency {
        score: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Ok,
    /// Nothing usable in the judge's reply.
    Failed,
    /// The judge could not be reached; never cached.
    TransportFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub template: TemplateId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<VerdictValue>,
    pub raw: String,
    pub status: ParseStatus,
}

impl JudgeVerdict {
    pub fn failed(template: TemplateId, raw: impl Into<String>, status: ParseStatus) -> Self {
        JudgeVerdict {
            template,
            value: None,
            raw: raw.into(),
            status,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ParseStatus::Ok
    }

    /// Failed verdicts read as incorrect.
    pub fn correct(&self) -> bool {
        matches!(
            self.value,
            Some(VerdictValue::Correctness { correct: true, .. })
        )
    }

    /// Failed verdicts read as not repeated.
    pub fn repeated(&self) -> bool {
        matches!(
            self.value,
            Some(VerdictValue::Repetition {
                is_repeated: true,
                ..
            })
        )
    }

    /// Failed verdicts read as no intention.
    pub fn intention(&self) -> bool {
        matches!(self.value, Some(VerdictValue::Intention { yes: true }))
    }

    /// Raw rubric score in `[0, 0.5]`; failed verdicts read as 0.
    pub fn consistency(&self) -> f64 {
        match self.value {
            Some(VerdictValue::Consistency { score }) => score,
            _ => 0.0,
        }
    }
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?(?:\d+(?:\.\d*)?|\.\d+)").unwrap())
}

fn yes_no_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(yes|no)\b").unwrap())
}

/// First JSON object in `text` that carries `key`, scanning every `{`.
pub fn first_json_with_key(text: &str, key: &str) -> Option<serde_json::Map<String, Value>> {
    text.char_indices()
        .filter(|&(_, c)| c == '{')
        .find_map(|(i, _)| {
            let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
            match stream.next() {
                Some(Ok(Value::Object(map))) if map.contains_key(key) => Some(map),
                _ => None,
            }
        })
}

fn as_bool(v: &Value) -> Option<bool> {
    match v {
        Value::Bool(b) => Some(*b),
        Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "true" | "yes" => Some(true),
            "false" | "no" => Some(false),
            _ => None,
        },
        _ => None,
    }
}

fn json_flag(text: &str, key: &str) -> Option<(bool, String)> {
    let map = first_json_with_key(text, key)?;
    let flag = as_bool(&map[key])?;
    let reasoning = map
        .get("reasoning")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    Some((flag, reasoning))
}

/// Nearest rubric value; ties go to the lower one.
pub fn snap_to_rubric(x: f64, rubric: &[f64]) -> Option<f64> {
    if !x.is_finite() {
        return None;
    }
    let mut best: Option<f64> = None;
    for &r in rubric {
        match best {
            Some(b) if (x - r).abs() >= (x - b).abs() => {}
            _ => best = Some(r),
        }
    }
    best
}

/// Total parser: every input maps to a verdict, possibly a failed one.
pub fn parse_verdict(template: TemplateId, raw: &str) -> JudgeVerdict {
    let value = match template.kind() {
        VerdictKind::Correctness => json_flag(raw, "correct")
            .map(|(correct, reasoning)| VerdictValue::Correctness { correct, reasoning }),
        VerdictKind::Repetition => {
            json_flag(raw, "is_repeated").map(|(is_repeated, reasoning)| VerdictValue::Repetition {
                is_repeated,
                reasoning,
            })
        }
        VerdictKind::Intention => yes_no_re().find(raw).map(|m| VerdictValue::Intention {
            yes: m.as_str().eq_ignore_ascii_case("yes"),
        }),
        VerdictKind::Consistency => number_re()
            .find(raw)
            .and_then(|m| m.as_str().parse::<f64>().ok())
            .and_then(|x| snap_to_rubric(x, template.rubric()))
            .map(|score| VerdictValue::Consistency { score }),
    };
    match value {
        Some(value) => JudgeVerdict {
            template,
            value: Some(value),
            raw: raw.to_string(),
            status: ParseStatus::Ok,
        },
        None => JudgeVerdict::failed(template, raw, ParseStatus::Failed),
    }
}
