//! Scoring engine for frame-level streaming dialogue.
//!
//! A sample is a [`StreamTimeline`] (turn count, injected queries, ground
//! truth) plus the model's [`Trajectory`] of silent/respond actions. Judge
//! verdicts for the in-window responses are folded into a [`SampleScore`]
//! that multiplies response quality by a verbosity multiplier and subtracts
//! a premature-response penalty. [`report::aggregate`] turns sample scores
//! into a benchmark table.
//!
//! The formulas are generic over [`Scalar`]; the aliases below fix the two
//! instantiations used in practice.

pub mod analysis;
pub mod error;
pub mod report;
pub mod scalar;
pub mod scoring;
pub mod task;
pub mod timeline;

pub use error::{CoreError, Result};
pub use num_rational::Rational64;
pub use scalar::Scalar;
pub use scoring::{ScoringParams, VerdictBundle};
pub use task::{Mode, Subtask};
pub use timeline::{Action, GroundTruthSpec, Reference, StreamTimeline, Trajectory, Turn};

/// Floating-point scalar used for reports and CLI output.
pub type Real = f64;
/// Exact scalar used for frozen reference values.
pub type Exact = Rational64;

pub type SampleScore = scoring::SampleScore<Real>;
pub type ExactSampleScore = scoring::SampleScore<Exact>;
pub type BenchmarkReport = report::BenchmarkReport<Real>;
pub type Verdicts = VerdictBundle<Real>;
pub type NoiseModel = analysis::NoiseModel<Real>;
