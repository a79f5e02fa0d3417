//! Benchmark aggregation and the fixed-width results table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::analysis::per_token_score;
use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::scoring::SampleScore;
use crate::task::{Mode, Subtask};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStats {
    pub total_tokens: u64,
    pub total_turns: u64,
}

impl TokenStats {
    pub fn add(&mut self, tokens: u64, turns: u64) {
        self.total_tokens += tokens;
        self.total_turns += turns;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskSummary<T> {
    pub samples: usize,
    /// Mean sample score, in percent.
    pub mean: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport<T> {
    pub samples: usize,
    pub subtasks: BTreeMap<Subtask, SubtaskSummary<T>>,
    /// Unweighted mean of the subtask means within each mode.
    pub modes: BTreeMap<Mode, T>,
    /// Unweighted mean of all subtask means.
    pub overall: Option<T>,
    pub avg_tokens_per_turn: Option<T>,
    pub per_token_score: Option<T>,
}

fn mean<T: Scalar>(values: impl IntoIterator<Item = T>) -> Option<T> {
    let (sum, n) = values
        .into_iter()
        .fold((T::zero(), 0u64), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / T::from_u64(n))
}

/// Folds labeled sample scores into a report. Labels must be subtask codes
/// and agree with the subtask recorded in the score.
pub fn aggregate<'a, T, L, I>(scores: I, tokens: TokenStats) -> Result<BenchmarkReport<T>>
where
    T: Scalar,
    L: AsRef<str>,
    I: IntoIterator<Item = (L, &'a SampleScore<T>)>,
{
    let mut buckets: BTreeMap<Subtask, Vec<T>> = BTreeMap::new();
    let mut samples = 0;
    for (label, score) in scores {
        let subtask: Subtask = label.as_ref().parse()?;
        if subtask != score.subtask {
            return Err(CoreError::invalid(format!(
                "sample {} labeled {subtask} but scored as {}",
                score.sample_id, score.subtask
            )));
        }
        buckets.entry(subtask).or_default().push(score.score);
        samples += 1;
    }
    let hundred = T::from_u64(100);
    let subtasks: BTreeMap<Subtask, SubtaskSummary<T>> = buckets
        .into_iter()
        .map(|(t, v)| {
            let n = v.len();
            let m = mean(v).unwrap_or_else(T::zero) * hundred;
            (
                t,
                SubtaskSummary {
                    samples: n,
                    mean: m,
                },
            )
        })
        .collect();
    let modes = Mode::ALL
        .into_iter()
        .filter_map(|mode| {
            mean(
                mode.subtasks()
                    .iter()
                    .filter_map(|t| subtasks.get(t).map(|s| s.mean)),
            )
            .map(|m| (mode, m))
        })
        .collect();
    let overall = mean(subtasks.values().map(|s| s.mean));
    let avg_tokens_per_turn = (tokens.total_turns > 0)
        .then(|| T::from_ratio(tokens.total_tokens as i64, tokens.total_turns as i64));
    let per_token_score = match (overall, avg_tokens_per_turn) {
        (Some(o), Some(a)) if a > T::zero() => Some(per_token_score(o, a)?),
        _ => None,
    };
    Ok(BenchmarkReport {
        samples,
        subtasks,
        modes,
        overall,
        avg_tokens_per_turn,
        per_token_score,
    })
}

fn cell<T: Scalar>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", x.to_f64()))
}

impl<T: Scalar> BenchmarkReport<T> {
    /// Fixed-width table: six perception subtasks and their average, three
    /// tracing subtasks and average, three forward subtasks and average,
    /// then the overall average.
    pub fn render_table(&self, model: &str) -> String {
        let mut header = vec!["Model".to_string()];
        let mut row = vec![model.to_string()];
        for mode in Mode::ALL {
            for t in mode.subtasks() {
                header.push(t.code().to_string());
                row.push(cell(self.subtasks.get(t).map(|s| s.mean)));
            }
            header.push(format!("{}-Avg", mode.short_name()));
            row.push(cell(self.modes.get(&mode).copied()));
        }
        header.push("Overall".into());
        row.push(cell(self.overall));

        let name_w = header[0].len().max(row[0].len());
        let mut out = String::new();
        for cols in [&header, &row] {
            let _ = write!(out, "{:<name_w$}", cols[0]);
            for c in &cols[1..] {
                let _ = write!(out, " {:>8}", c);
            }
            out.push('\n');
        }
        let tokens = self
            .avg_tokens_per_turn
            .map_or_else(|| "-".into(), |t| format!("{:.2}", t.to_f64()));
        let eta = self
            .per_token_score
            .map_or_else(|| "-".into(), |e| format!("{:.2}", e.to_f64()));
        let _ = writeln!(
            out,
            "samples: {}  avg tokens/turn: {tokens}  per-token score: {eta}",
            self.samples
        );
        out
    }
}
