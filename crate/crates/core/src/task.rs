//! Task modes and the twelve benchmark subtasks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;

/// The three evaluation regimes. They differ in matching tolerance and in
/// which verbosity multiplier applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    RealTimePerception,
    BackwardTracing,
    ForwardActive,
}

impl Mode {
    pub const ALL: [Mode; 3] = [
        Mode::RealTimePerception,
        Mode::BackwardTracing,
        Mode::ForwardActive,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            Mode::RealTimePerception => "RTVP",
            Mode::BackwardTracing => "BT",
            Mode::ForwardActive => "FAR",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Mode::RealTimePerception => "Real-Time Visual Perception",
            Mode::BackwardTracing => "Backward Tracing",
            Mode::ForwardActive => "Forward Active Responding",
        }
    }

    pub fn subtasks(self) -> &'static [Subtask] {
        use Subtask::*;
        match self {
            Mode::RealTimePerception => &[Ocr, Acr, Atr, Stu, Fpd, Ojr],
            Mode::BackwardTracing => &[Epm, Asi, Hld],
            Mode::ForwardActive => &[Rec, Ssr, Crr],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Subtask {
    Ocr,
    Acr,
    Atr,
    Stu,
    Fpd,
    Ojr,
    Epm,
    Asi,
    Hld,
    Rec,
    Ssr,
    Crr,
}

impl Subtask {
    /// Table order: perception, tracing, then forward responding.
    pub const ALL: [Subtask; 12] = [
        Subtask::Ocr,
        Subtask::Acr,
        Subtask::Atr,
        Subtask::Stu,
        Subtask::Fpd,
        Subtask::Ojr,
        Subtask::Epm,
        Subtask::Asi,
        Subtask::Hld,
        Subtask::Rec,
        Subtask::Ssr,
        Subtask::Crr,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Subtask::Ocr => "OCR",
            Subtask::Acr => "ACR",
            Subtask::Atr => "ATR",
            Subtask::Stu => "STU",
            Subtask::Fpd => "FPD",
            Subtask::Ojr => "OJR",
            Subtask::Epm => "EPM",
            Subtask::Asi => "ASI",
            Subtask::Hld => "HLD",
            Subtask::Rec => "REC",
            Subtask::Ssr => "SSR",
            Subtask::Crr => "CRR",
        }
    }

    pub fn full_name(self) -> &'static str {
        match self {
            Subtask::Ocr => "Optical Character Recognition",
            Subtask::Acr => "Action Recognition",
            Subtask::Atr => "Attribute Recognition",
            Subtask::Stu => "Spatial Understanding",
            Subtask::Fpd => "Future Prediction",
            Subtask::Ojr => "Object Recognition",
            Subtask::Epm => "Episodic Memory",
            Subtask::Asi => "Action Sequence Identification",
            Subtask::Hld => "Hallucination Detection",
            Subtask::Rec => "Repetition Event Count",
            Subtask::Ssr => "Sequential Steps Recognition",
            Subtask::Crr => "Clues Reveal Responding",
        }
    }

    pub fn mode(self) -> Mode {
        use Subtask::*;
        match self {
            Ocr | Acr | Atr | Stu | Fpd | Ojr => Mode::RealTimePerception,
            Epm | Asi | Hld => Mode::BackwardTracing,
            Rec | Ssr | Crr => Mode::ForwardActive,
        }
    }
}

impl fmt::Display for Subtask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Subtask {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim();
        Subtask::ALL
            .into_iter()
            .find(|t| t.code().eq_ignore_ascii_case(trimmed))
            .ok_or_else(|| CoreError::UnknownSubtask(trimmed.to_string()))
    }
}
