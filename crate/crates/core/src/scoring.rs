//! Verbosity-aware sample scoring.
//!
//! A sample scores `S = max(0, quality * M - P_early)`:
//!
//! * `quality` averages, over ground-truth turns, the best judge value of any
//!   response inside the turn's matching window (an empty window counts 0);
//! * `M` is the answer-rate step multiplier for forward-active samples and
//!   the repetition multiplier otherwise;
//! * `P_early` is a flat deduction for forward-active samples that respond
//!   before the first window opens.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::task::{Mode, Subtask};
use crate::timeline::{
    answer_rate, response_turns, StreamTimeline, Trajectory, Turn, DEFAULT_FAR_DELTA,
};

/// Judge output for one sample, already mapped onto `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VerdictBundle<T> {
    /// Judge value keyed by `(ground-truth turn, response turn)`.
    pub pair_scores: BTreeMap<(Turn, Turn), T>,
    /// Response turns that failed the intention gate. They still count
    /// toward the answer rate but can never match.
    pub gated_turns: BTreeSet<Turn>,
    /// Repetition verdict; required for perception and tracing samples that
    /// contain at least one response.
    pub repetition: Option<bool>,
}

impl<T> Default for VerdictBundle<T> {
    fn default() -> Self {
        VerdictBundle {
            pair_scores: BTreeMap::new(),
            gated_turns: BTreeSet::new(),
            repetition: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringParams<T> {
    pub premature_penalty: T,
    pub far_delta_default: u32,
}

impl<T: Scalar> Default for ScoringParams<T> {
    fn default() -> Self {
        ScoringParams {
            premature_penalty: T::from_ratio(1, 10),
            far_delta_default: DEFAULT_FAR_DELTA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchDetail<T> {
    pub gt_turn: Turn,
    /// Earliest response achieving the best judge value, if any was eligible.
    pub matched_turn: Option<Turn>,
    pub value: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore<T> {
    pub sample_id: String,
    pub subtask: Subtask,
    pub mode: Mode,
    pub quality: T,
    pub r_ans: T,
    pub multiplier: T,
    pub premature: bool,
    /// Deduction actually applied (zero unless `premature`).
    pub premature_penalty: T,
    pub score: T,
    pub matches: Vec<MatchDetail<T>>,
}

/// Answer-rate step multiplier for forward-active samples.
pub fn far_multiplier<T: Scalar>(r_ans: T) -> Result<T> {
    if r_ans < T::zero() || r_ans > T::one() {
        return Err(CoreError::invalid(format!(
            "answer rate {r_ans} outside [0, 1]"
        )));
    }
    if r_ans < T::from_ratio(2, 5) {
        return Ok(T::one());
    }
    // Tier values are built from the integer step count; `1 - 0.2 * 3`
    // in binary floating point is not 0.4.
    let steps = (T::from_u64(5) * r_ans).floor().to_f64() as i64;
    Ok(T::from_ratio((5 - steps).max(1), 5))
}

/// Same step function evaluated from integer counts, so tier boundaries
/// are hit exactly whatever the scalar type.
pub fn far_multiplier_from_counts<T: Scalar>(responses: usize, turns: usize) -> Result<T> {
    if turns == 0 || responses > turns {
        return Err(CoreError::invalid(format!(
            "{responses} responses over {turns} turns"
        )));
    }
    if 5 * responses < 2 * turns {
        return Ok(T::one());
    }
    let steps = (5 * responses / turns) as i64;
    Ok(T::from_ratio((5 - steps).max(1), 5))
}

/// Halves the score when the judge saw the same answer repeated.
pub fn repetition_multiplier<T: Scalar>(
    mode: Mode,
    traj: &Trajectory,
    repeated: bool,
) -> Result<T> {
    if mode == Mode::ForwardActive {
        return Err(CoreError::ModeMismatch("forward-active"));
    }
    let any_response = traj.turns.iter().any(|a| a.is_respond());
    Ok(if repeated && any_response {
        T::from_ratio(1, 2)
    } else {
        T::one()
    })
}

/// Whether any response lands strictly before the first window opens.
/// Always false outside forward-active mode.
pub fn is_premature(timeline: &StreamTimeline, traj: &Trajectory, far_delta_default: u32) -> bool {
    let gt = timeline.ground_truth();
    if gt.mode != Mode::ForwardActive {
        return false;
    }
    let Some(&first) = gt.gt_timestamps.iter().next() else {
        return false;
    };
    let opens = first as i64 - gt.effective_delta(far_delta_default) as i64;
    response_turns(traj)
        .first()
        .is_some_and(|&t| (t as i64) < opens)
}

pub fn premature_penalty<T: Scalar>(
    timeline: &StreamTimeline,
    traj: &Trajectory,
    params: &ScoringParams<T>,
) -> T {
    if is_premature(timeline, traj, params.far_delta_default) {
        params.premature_penalty
    } else {
        T::zero()
    }
}

/// Response-quality term together with the per-ground-truth match detail.
pub fn quality_detail<T: Scalar>(
    timeline: &StreamTimeline,
    traj: &Trajectory,
    verdicts: &VerdictBundle<T>,
    far_delta_default: u32,
) -> Result<(T, Vec<MatchDetail<T>>)> {
    let gt = timeline.ground_truth();
    let delta = gt.effective_delta(far_delta_default);
    let responses = response_turns(traj);
    let mut total = T::zero();
    let mut matches = Vec::with_capacity(gt.gt_timestamps.len());
    for &gt_turn in &gt.gt_timestamps {
        let mut best: Option<(Turn, T)> = None;
        let lo = gt_turn.saturating_sub(delta);
        let hi = gt_turn.saturating_add(delta);
        for &t in responses.iter().filter(|&&t| t >= lo && t <= hi) {
            if verdicts.gated_turns.contains(&t) {
                continue;
            }
            let value = *verdicts
                .pair_scores
                .get(&(gt_turn, t))
                .ok_or(CoreError::IncompleteVerdicts { gt_turn, turn: t })?;
            if value < T::zero() || value > T::one() {
                return Err(CoreError::invalid(format!(
                    "judge value {value} for ({gt_turn}, {t}) outside [0, 1]"
                )));
            }
            if best.is_none_or(|(_, b)| value > b) {
                best = Some((t, value));
            }
        }
        let value = best.map_or(T::zero(), |(_, v)| v);
        total = total + value;
        matches.push(MatchDetail {
            gt_turn,
            matched_turn: best.map(|(t, _)| t),
            value,
        });
    }
    Ok((total / T::from_u64(gt.gt_timestamps.len() as u64), matches))
}

/// Mean over ground-truth turns of the best in-window judge value.
pub fn quality_term<T: Scalar>(
    timeline: &StreamTimeline,
    traj: &Trajectory,
    verdicts: &VerdictBundle<T>,
    far_delta_default: u32,
) -> Result<T> {
    quality_detail(timeline, traj, verdicts, far_delta_default).map(|(q, _)| q)
}

pub fn score_sample<T: Scalar>(
    timeline: &StreamTimeline,
    traj: &Trajectory,
    verdicts: &VerdictBundle<T>,
    params: &ScoringParams<T>,
) -> Result<SampleScore<T>> {
    if traj.len() != timeline.turn_count() as usize {
        return Err(CoreError::invalid(format!(
            "trajectory has {} turns, timeline has {}",
            traj.len(),
            timeline.turn_count()
        )));
    }
    let gt = timeline.ground_truth();
    let (quality, matches) = quality_detail(timeline, traj, verdicts, params.far_delta_default)?;
    let rate = answer_rate(traj)?;
    let r_ans = T::from_ratio(*rate.numer(), *rate.denom());
    let responses = response_turns(traj).len();
    let multiplier = match gt.mode {
        Mode::ForwardActive => far_multiplier_from_counts(responses, traj.len())?,
        mode => {
            let repeated = match (responses, verdicts.repetition) {
                (0, _) => false,
                (_, Some(v)) => v,
                (_, None) => return Err(CoreError::MissingRepetitionVerdict),
            };
            repetition_multiplier(mode, traj, repeated)?
        }
    };
    let premature = is_premature(timeline, traj, params.far_delta_default);
    let penalty = if premature {
        params.premature_penalty
    } else {
        T::zero()
    };
    let score = (quality * multiplier - penalty).max_of(T::zero());
    Ok(SampleScore {
        sample_id: timeline.sample_id().to_string(),
        subtask: gt.subtask,
        mode: gt.mode,
        quality,
        r_ans,
        multiplier,
        premature,
        premature_penalty: penalty,
        score,
        matches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeline::{Action, GroundTruthSpec, Reference};
    use num_rational::Rational64;

    fn tl(
        mode: Mode,
        subtask: Subtask,
        t: u32,
        gts: &[Turn],
        delta: Option<u32>,
    ) -> StreamTimeline {
        StreamTimeline::new(
            "s",
            0.5,
            t,
            BTreeMap::new(),
            GroundTruthSpec {
                mode,
                subtask,
                gt_timestamps: gts.iter().copied().collect(),
                references: gts.iter().map(|&g| (g, Reference::answer("a"))).collect(),
                delta,
                options: None,
                question: None,
                activity: None,
            },
        )
        .unwrap()
    }

    fn traj(t: u32, responding: &[Turn]) -> Trajectory {
        Trajectory::new(
            "s",
            (1..=t)
                .map(|i| {
                    if responding.contains(&i) {
                        Action::respond(format!("r{i}"), 2).unwrap()
                    } else {
                        Action::silent()
                    }
                })
                .collect(),
        )
    }

    fn r(n: i64, d: i64) -> Rational64 {
        Rational64::new(n, d)
    }

    #[test]
    fn far_multiplier_table() {
        let cases = [
            (0.39, 1.0),
            (0.4, 0.6),
            (0.6, 0.4),
            (0.8, 0.2),
            (1.0, 0.2),
            (0.0, 1.0),
            (0.5, 0.6),
        ];
        for (x, want) in cases {
            assert_eq!(far_multiplier(x).unwrap(), want, "r_ans = {x}");
        }
        assert_eq!(far_multiplier(r(2, 5)).unwrap(), r(3, 5));
        assert_eq!(far_multiplier(r(1, 1)).unwrap(), r(1, 5));
        assert!(far_multiplier(1.01).is_err());
        assert!(far_multiplier(-0.1).is_err());
    }

    #[test]
    fn count_based_multiplier_matches() {
        for turns in 1..=40usize {
            for resp in 0..=turns {
                let exact: Rational64 = far_multiplier_from_counts(resp, turns).unwrap();
                assert_eq!(exact, far_multiplier(r(resp as i64, turns as i64)).unwrap());
            }
        }
        assert!(far_multiplier_from_counts::<f64>(3, 2).is_err());
        assert!(far_multiplier_from_counts::<f64>(0, 0).is_err());
    }

    #[test]
    fn repetition_multiplier_rules() {
        let t = traj(4, &[2]);
        assert_eq!(
            repetition_multiplier::<f64>(Mode::RealTimePerception, &t, true).unwrap(),
            0.5
        );
        assert_eq!(
            repetition_multiplier::<f64>(Mode::BackwardTracing, &t, false).unwrap(),
            1.0
        );
        let silent = traj(4, &[]);
        assert_eq!(
            repetition_multiplier::<f64>(Mode::RealTimePerception, &silent, true).unwrap(),
            1.0
        );
        assert!(matches!(
            repetition_multiplier::<f64>(Mode::ForwardActive, &t, true),
            Err(CoreError::ModeMismatch(_))
        ));
    }

    #[test]
    fn premature_examples() {
        let far = tl(Mode::ForwardActive, Subtask::Crr, 40, &[30], Some(5));
        let p = ScoringParams::<f64>::default();
        assert_eq!(premature_penalty(&far, &traj(40, &[10]), &p), 0.1);
        assert_eq!(premature_penalty(&far, &traj(40, &[26]), &p), 0.0);
        assert_eq!(premature_penalty(&far, &traj(40, &[25]), &p), 0.0);
        assert_eq!(premature_penalty(&far, &traj(40, &[24]), &p), 0.1);
        let rt = tl(Mode::RealTimePerception, Subtask::Ocr, 40, &[30], None);
        assert_eq!(premature_penalty(&rt, &traj(40, &[1, 2, 3]), &p), 0.0);
    }

    #[test]
    fn quality_examples() {
        let far = tl(Mode::ForwardActive, Subtask::Rec, 40, &[10, 20], Some(2));
        let t = traj(40, &[11, 30]);
        let mut v = VerdictBundle::default();
        v.pair_scores.insert((10, 11), r(1, 1));
        assert_eq!(quality_term(&far, &t, &v, 5).unwrap(), r(1, 2));

        assert_eq!(
            quality_term(
                &far,
                &traj(40, &[]),
                &VerdictBundle::<Rational64>::default(),
                5
            )
            .unwrap(),
            r(0, 1)
        );

        let exact = tl(Mode::RealTimePerception, Subtask::Ocr, 8, &[5], None);
        let mut v = VerdictBundle::default();
        v.pair_scores.insert((5, 5), 1.0);
        assert_eq!(quality_term(&exact, &traj(8, &[5]), &v, 5).unwrap(), 1.0);
    }

    #[test]
    fn quality_missing_verdict_names_pair() {
        let far = tl(Mode::ForwardActive, Subtask::Rec, 40, &[10], Some(2));
        let err =
            quality_term(&far, &traj(40, &[9]), &VerdictBundle::<f64>::default(), 5).unwrap_err();
        assert_eq!(
            err,
            CoreError::IncompleteVerdicts {
                gt_turn: 10,
                turn: 9
            }
        );
    }

    #[test]
    fn quality_rejects_out_of_range_values() {
        let rt = tl(Mode::RealTimePerception, Subtask::Ocr, 5, &[2], None);
        let mut v = VerdictBundle::default();
        v.pair_scores.insert((2, 2), 1.5);
        v.repetition = Some(false);
        assert!(quality_term(&rt, &traj(5, &[2]), &v, 5).is_err());
    }

    #[test]
    fn gated_turns_never_match() {
        let far = tl(Mode::ForwardActive, Subtask::Crr, 20, &[10], Some(2));
        let t = traj(20, &[10]);
        let mut v = VerdictBundle::default();
        v.gated_turns.insert(10);
        let s = score_sample(&far, &t, &v, &ScoringParams::<f64>::default()).unwrap();
        assert_eq!(s.quality, 0.0);
        assert_eq!(s.r_ans, 0.05);
        assert_eq!(s.matches[0].matched_turn, None);
    }

    #[test]
    fn score_examples() {
        let params = ScoringParams::<Rational64>::default();
        // Always responding, premature, perfect judge.
        let far = tl(Mode::ForwardActive, Subtask::Rec, 20, &[10, 15], Some(2));
        let t = traj(20, &(1..=20).collect::<Vec<_>>());
        let mut v = VerdictBundle::default();
        for g in [10u32, 15] {
            for x in g - 2..=g + 2 {
                v.pair_scores.insert((g, x), r(1, 1));
            }
        }
        let s = score_sample(&far, &t, &v, &params).unwrap();
        assert_eq!(s.quality, r(1, 1));
        assert_eq!(s.multiplier, r(1, 5));
        assert!(s.premature);
        assert_eq!(s.score, r(1, 10));

        for (mode, sub) in [
            (Mode::RealTimePerception, Subtask::Ocr),
            (Mode::BackwardTracing, Subtask::Hld),
            (Mode::ForwardActive, Subtask::Ssr),
        ] {
            let timeline = tl(mode, sub, 10, &[5], None);
            let s = score_sample(
                &timeline,
                &traj(10, &[]),
                &VerdictBundle::default(),
                &params,
            )
            .unwrap();
            assert_eq!(s.score, r(0, 1));
        }

        let rt = tl(Mode::RealTimePerception, Subtask::Atr, 10, &[4], None);
        let mut v = VerdictBundle::default();
        v.pair_scores.insert((4, 4), r(1, 1));
        v.repetition = Some(true);
        let s = score_sample(&rt, &traj(10, &[3, 4]), &v, &params).unwrap();
        assert_eq!(s.score, r(1, 2));
    }

    #[test]
    fn score_floors_at_zero() {
        let far = tl(Mode::ForwardActive, Subtask::Crr, 10, &[9], Some(0));
        let t = traj(10, &[1]);
        let s = score_sample(
            &far,
            &t,
            &VerdictBundle::default(),
            &ScoringParams::<f64>::default(),
        )
        .unwrap();
        assert!(s.premature);
        assert_eq!(s.score, 0.0);
    }

    #[test]
    fn missing_repetition_verdict() {
        let rt = tl(Mode::BackwardTracing, Subtask::Epm, 6, &[3], None);
        let mut v = VerdictBundle::default();
        v.pair_scores.insert((3, 3), 1.0);
        assert_eq!(
            score_sample(&rt, &traj(6, &[3]), &v, &ScoringParams::default()).unwrap_err(),
            CoreError::MissingRepetitionVerdict
        );
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let rt = tl(Mode::BackwardTracing, Subtask::Epm, 6, &[3], None);
        assert!(score_sample(
            &rt,
            &traj(5, &[]),
            &VerdictBundle::<f64>::default(),
            &ScoringParams::default()
        )
        .is_err());
    }
}
