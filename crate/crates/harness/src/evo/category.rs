use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

/// The five self-generation task categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskCategory {
    #[serde(rename = "IV")]
    ImmediateVisual,
    #[serde(rename = "MD")]
    MemoryDependent,
    #[serde(rename = "TA")]
    TemporalAggregation,
    #[serde(rename = "AM")]
    AnticipatoryMonitoring,
    #[serde(rename = "DED")]
    DynamicEventDescription,
}

/// Per-category prompt clauses shipped in `templates/evo/categories.json`.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct CategoryClauses {
    pub code: String,
    pub name: String,
    pub objective: String,
    pub video_skill: String,
    pub question_instruction: String,
    pub annotation_target: String,
    pub response_rule: String,
}

const CATEGORIES_JSON: &str = include_str!("../../templates/evo/categories.json");

impl TaskCategory {
    pub const ALL: [TaskCategory; 5] = [
        TaskCategory::ImmediateVisual,
        TaskCategory::MemoryDependent,
        TaskCategory::TemporalAggregation,
        TaskCategory::AnticipatoryMonitoring,
        TaskCategory::DynamicEventDescription,
    ];

    pub fn code(self) -> &'static str {
        match self {
            TaskCategory::ImmediateVisual => "IV",
            TaskCategory::MemoryDependent => "MD",
            TaskCategory::TemporalAggregation => "TA",
            TaskCategory::AnticipatoryMonitoring => "AM",
            TaskCategory::DynamicEventDescription => "DED",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskCategory::ImmediateVisual => "Immediate Visual",
            TaskCategory::MemoryDependent => "Memory-Dependent",
            TaskCategory::TemporalAggregation => "Temporal Aggregation",
            TaskCategory::AnticipatoryMonitoring => "Anticipatory Monitoring",
            TaskCategory::DynamicEventDescription => "Dynamic Event Description",
        }
    }

    pub fn clauses(self) -> &'static CategoryClauses {
        static ALL: OnceLock<Vec<CategoryClauses>> = OnceLock::new();
        let all = ALL.get_or_init(|| {
            let parsed: Vec<CategoryClauses> =
                serde_json::from_str(CATEGORIES_JSON).expect("categories.json is valid");
            TaskCategory::ALL
                .iter()
                .map(|c| {
                    parsed
                        .iter()
                        .find(|p| p.code == c.code())
                        .unwrap_or_else(|| panic!("categories.json lacks {}", c.code()))
                        .clone()
                })
                .collect()
        });
        &all[self as usize]
    }

    /// Query injected at the first relevant segment rather than up front.
    pub fn injects_at_evidence(self) -> bool {
        matches!(
            self,
            TaskCategory::ImmediateVisual | TaskCategory::MemoryDependent
        )
    }

    /// Finds a category label or code in free text. Full names win over
    /// codes; the earliest match wins among equals.
    pub fn find_in(text: &str) -> Option<TaskCategory> {
        let lower = text.to_lowercase();
        let by_name = TaskCategory::ALL
            .iter()
            .filter_map(|c| {
                let name = c.name().to_lowercase();
                lower
                    .find(&name)
                    .or_else(|| lower.find(&name.replace('-', " ")))
                    .map(|i| (i, *c))
            })
            .min();
        if let Some((_, c)) = by_name {
            return Some(c);
        }
        text.split(|ch: char| !ch.is_ascii_alphanumeric())
            .find_map(|tok| TaskCategory::ALL.into_iter().find(|c| c.code() == tok))
    }
}

impl fmt::Display for TaskCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        TaskCategory::ALL
            .into_iter()
            .find(|c| c.code().eq_ignore_ascii_case(t) || c.name().eq_ignore_ascii_case(t))
            .ok_or_else(|| format!("unknown task category `{s}`"))
    }
}
