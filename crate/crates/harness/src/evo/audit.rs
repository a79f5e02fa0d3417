//! Dataset audit over a seeded sample: two mechanical dimensions and three
//! optional model-assisted ones.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chat::{ChatModel, ChatRequest};
use crate::template::Template;

use super::export::{validity_issue, ConversationRecord, ExportFilters};
use super::{EvoError, SILENT};

const TASK_TYPE: &str = include_str!("../../templates/evo/audit_task_type.txt");
const ANSWERABLE: &str = include_str!("../../templates/evo/audit_answerable.txt");
const RELEVANCE: &str = include_str!("../../templates/evo/audit_relevance.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditDimension {
    TaskTypeConsistency,
    QuestionAnswerability,
    TemporalRelevanceQuality,
    TrajectoryConsistency,
    SampleValidity,
}

impl AuditDimension {
    pub const ALL: [AuditDimension; 5] = [
        AuditDimension::TaskTypeConsistency,
        AuditDimension::QuestionAnswerability,
        AuditDimension::TemporalRelevanceQuality,
        AuditDimension::TrajectoryConsistency,
        AuditDimension::SampleValidity,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditFlag {
    pub video_id: String,
    pub dimension: AuditDimension,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub sampled: usize,
    pub seed: u64,
    /// Pass rate per dimension; `None` when the dimension needs a judge and
    /// none was supplied.
    pub pass_rates: BTreeMap<AuditDimension, Option<f64>>,
    pub flags: Vec<AuditFlag>,
}

impl AuditReport {
    pub fn rate(&self, d: AuditDimension) -> Option<f64> {
        self.pass_rates.get(&d).copied().flatten()
    }
}

fn evidence(r: &ConversationRecord) -> String {
    let lines: Vec<String> = r
        .turns
        .iter()
        .enumerate()
        .filter(|(_, t)| t.relevant)
        .map(|(i, t)| {
            let refs = t.segment_refs.join(", ");
            if t.assistant == SILENT {
                format!("segment {} ({refs})", i + 1)
            } else {
                format!("segment {} ({refs}): {}", i + 1, t.assistant)
            }
        })
        .collect();
    if lines.is_empty() {
        "None".into()
    } else {
        lines.join("\n")
    }
}

fn ask_yes(
    model: &dyn ChatModel,
    template: &str,
    name: &str,
    slots: BTreeMap<&str, String>,
) -> Result<bool, String> {
    let prompt = Template::new(name, template.to_string())
        .render(&slots)
        .map_err(|e| e.to_string())?;
    let reply = model
        .complete(&ChatRequest::single_user(prompt).with_temperature(0.0))
        .map_err(|e| e.to_string())?;
    Ok(reply.content.trim().to_ascii_lowercase().starts_with("yes"))
}

/// Audits `n` records drawn without replacement with a ChaCha stream
/// seeded by `seed`.
pub fn audit(
    records: &[ConversationRecord],
    n: usize,
    seed: u64,
    judge: Option<&dyn ChatModel>,
) -> Result<AuditReport, EvoError> {
    if n > records.len() {
        return Err(EvoError::AuditSize {
            requested: n,
            available: records.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, records.len(), n).into_vec();
    picked.sort_unstable();

    let mut duplicates = BTreeSet::new();
    let mut seen = BTreeSet::new();
    for (i, r) in records.iter().enumerate() {
        if !seen.insert((&r.video_id, r.question.to_lowercase(), r.action_sequence())) {
            duplicates.insert(i);
        }
    }

    let mut passes: BTreeMap<AuditDimension, usize> = BTreeMap::new();
    let mut judged: BTreeMap<AuditDimension, usize> = BTreeMap::new();
    let mut flags = Vec::new();
    let mut record = |r: &ConversationRecord, d: AuditDimension, ok: bool, detail: String| {
        *judged.entry(d).or_insert(0) += 1;
        if ok {
            *passes.entry(d).or_insert(0) += 1;
        } else {
            flags.push(AuditFlag {
                video_id: r.video_id.clone(),
                dimension: d,
                detail,
            });
        }
    };

    for &i in &picked {
        let r = &records[i];
        let bad_turn = r.inconsistent_turn();
        record(
            r,
            AuditDimension::TrajectoryConsistency,
            bad_turn.is_none(),
            bad_turn.map_or(String::new(), |t| {
                format!("turn {} disagrees with its decision", t + 1)
            }),
        );
        let issue = validity_issue(r, &ExportFilters::default());
        let dup = duplicates.contains(&i);
        record(
            r,
            AuditDimension::SampleValidity,
            issue.is_none() && !dup,
            match (issue, dup) {
                (Some(d), _) => format!("{d:?}"),
                (None, true) => "Duplicate".into(),
                _ => String::new(),
            },
        );
        let Some(model) = judge else { continue };
        let c = r.category.clauses();
        let checks = [
            (
                AuditDimension::TaskTypeConsistency,
                TASK_TYPE,
                "audit_task_type",
                BTreeMap::from([
                    ("category", format!("{} ({})", c.name, c.code)),
                    ("objective", c.objective.clone()),
                    ("question", r.question.clone()),
                ]),
            ),
            (
                AuditDimension::QuestionAnswerability,
                ANSWERABLE,
                "audit_answerable",
                BTreeMap::from([("question", r.question.clone()), ("evidence", evidence(r))]),
            ),
            (
                AuditDimension::TemporalRelevanceQuality,
                RELEVANCE,
                "audit_relevance",
                BTreeMap::from([("question", r.question.clone()), ("evidence", evidence(r))]),
            ),
        ];
        for (d, template, name, slots) in checks {
            match ask_yes(model, template, name, slots) {
                Ok(ok) => record(r, d, ok, "judge answered no".into()),
                Err(e) => record(r, d, false, format!("judge failed: {e}")),
            }
        }
    }

    let pass_rates = AuditDimension::ALL
        .iter()
        .map(|&d| {
            let rate = judged.get(&d).map(|&total| {
                if total == 0 {
                    1.0
                } else {
                    passes.get(&d).copied().unwrap_or(0) as f64 / total as f64
                }
            });
            let rate = match (d, rate) {
                (AuditDimension::TrajectoryConsistency | AuditDimension::SampleValidity, None) => {
                    Some(1.0)
                }
                (_, r) => r,
            };
            (d, rate)
        })
        .collect();
    Ok(AuditReport {
        sampled: n,
        seed,
        pass_rates,
        flags,
    })
}
