use std::collections::{BTreeMap, BTreeSet};

use num_rational::Rational64;
use proptest::prelude::*;
use realstream_core::analysis::{
    corrected_loss, effective_samples, sample_budget, spearman, Label, NoiseModel, RankVector,
};
use realstream_core::scoring::{
    far_multiplier, quality_term, score_sample, ScoringParams, VerdictBundle,
};
use realstream_core::timeline::{answer_rate, response_turns, Reference};
use realstream_core::{Action, GroundTruthSpec, Mode, StreamTimeline, Subtask, Trajectory, Turn};

/// Exhaustive reference for the quality term: walk every (ground truth,
/// turn) pair of the stream, keep the in-window responding ungated ones.
fn brute_force_quality(
    turn_count: u32,
    gts: &BTreeSet<Turn>,
    delta: u32,
    responding: &[bool],
    gated: &BTreeSet<Turn>,
    judge: &BTreeMap<(Turn, Turn), Rational64>,
) -> Rational64 {
    let mut sum = Rational64::from_integer(0);
    for &g in gts {
        let mut best = Rational64::from_integer(0);
        for t in 1..=turn_count {
            let in_window = (t as i64 - g as i64).abs() <= delta as i64;
            if in_window && responding[(t - 1) as usize] && !gated.contains(&t) {
                let v = judge[&(g, t)];
                if v > best {
                    best = v;
                }
            }
        }
        sum += best;
    }
    sum / Rational64::from_integer(gts.len() as i64)
}

fn timeline(mode: Mode, turn_count: u32, gts: &BTreeSet<Turn>, delta: u32) -> StreamTimeline {
    let subtask = match mode {
        Mode::RealTimePerception => Subtask::Ojr,
        Mode::BackwardTracing => Subtask::Asi,
        Mode::ForwardActive => Subtask::Ssr,
    };
    StreamTimeline::new(
        "p",
        0.5,
        turn_count,
        BTreeMap::new(),
        GroundTruthSpec {
            mode,
            subtask,
            gt_timestamps: gts.clone(),
            references: gts.iter().map(|&g| (g, Reference::answer("a"))).collect(),
            delta: (mode == Mode::ForwardActive).then_some(delta),
            options: None,
            question: None,
            activity: None,
        },
    )
    .unwrap()
}

fn trajectory(responding: &[bool]) -> Trajectory {
    Trajectory::new(
        "p",
        responding
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                if r {
                    Action::respond(format!("answer {i}"), 3).unwrap()
                } else {
                    Action::silent()
                }
            })
            .collect(),
    )
}

#[derive(Debug, Clone)]
struct Instance {
    mode: Mode,
    turn_count: u32,
    gts: BTreeSet<Turn>,
    delta: u32,
    responding: Vec<bool>,
    gated: BTreeSet<Turn>,
    judge: BTreeMap<(Turn, Turn), Rational64>,
}

fn instance() -> impl Strategy<Value = Instance> {
    (1u32..=20, 0u32..=3, 0usize..3)
        .prop_flat_map(|(t, delta, mode_idx)| {
            (
                Just(t),
                Just(delta),
                Just(Mode::ALL[mode_idx]),
                prop::collection::btree_set(1..=t, 1..=4usize.min(t as usize)),
                prop::collection::vec(any::<bool>(), t as usize),
                prop::collection::btree_set(1..=t, 0..=3),
                prop::collection::vec(0i64..=10, (t * t) as usize),
            )
        })
        .prop_map(|(turn_count, delta, mode, gts, responding, gated, raw)| {
            let mut judge = BTreeMap::new();
            for g in 1..=turn_count {
                for t in 1..=turn_count {
                    let v = raw[((g - 1) * turn_count + (t - 1)) as usize];
                    judge.insert((g, t), Rational64::new(v, 10));
                }
            }
            let gated = if mode == Mode::ForwardActive {
                gated
            } else {
                BTreeSet::new()
            };
            Instance {
                mode,
                turn_count,
                gts,
                delta,
                responding,
                gated,
                judge,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn quality_term_matches_enumeration(inst in instance()) {
        let tl = timeline(inst.mode, inst.turn_count, &inst.gts, inst.delta);
        let traj = trajectory(&inst.responding);
        let bundle = VerdictBundle {
            pair_scores: inst.judge.clone(),
            gated_turns: inst.gated.clone(),
            repetition: Some(false),
        };
        let effective_delta = if inst.mode == Mode::ForwardActive { inst.delta } else { 0 };
        let expected = brute_force_quality(
            inst.turn_count, &inst.gts, effective_delta, &inst.responding, &inst.gated, &inst.judge,
        );
        prop_assert_eq!(quality_term(&tl, &traj, &bundle, 5).unwrap(), expected);
    }

    #[test]
    fn score_bounds(inst in instance(), repeated in any::<bool>()) {
        let tl = timeline(inst.mode, inst.turn_count, &inst.gts, inst.delta);
        let traj = trajectory(&inst.responding);
        let bundle = VerdictBundle {
            pair_scores: inst.judge.clone(),
            gated_turns: inst.gated.clone(),
            repetition: Some(repeated),
        };
        let s = score_sample(&tl, &traj, &bundle, &ScoringParams::default()).unwrap();
        prop_assert!(s.score >= Rational64::from_integer(0));
        prop_assert!(s.score <= Rational64::from_integer(1));
        prop_assert!(s.score <= s.quality);
        let again = score_sample(&tl, &traj, &bundle, &ScoringParams::default()).unwrap();
        prop_assert_eq!(s, again);
    }

    #[test]
    fn extra_out_of_window_response_never_helps(inst in instance()) {
        let tl = timeline(Mode::ForwardActive, inst.turn_count, &inst.gts, inst.delta);
        let outside: Vec<Turn> = (1..=inst.turn_count)
            .filter(|&t| !inst.responding[(t - 1) as usize])
            .filter(|&t| inst.gts.iter().all(|&g| (t as i64 - g as i64).abs() > inst.delta as i64))
            .collect();
        prop_assume!(!outside.is_empty());
        let bundle = VerdictBundle {
            pair_scores: inst.judge.clone(),
            gated_turns: BTreeSet::new(),
            repetition: None,
        };
        let params = ScoringParams::default();
        let before = score_sample(&tl, &trajectory(&inst.responding), &bundle, &params).unwrap();
        let mut more = inst.responding.clone();
        more[(outside[0] - 1) as usize] = true;
        let after = score_sample(&tl, &trajectory(&more), &bundle, &params).unwrap();
        prop_assert_eq!(after.quality, before.quality);
        prop_assert!(after.multiplier <= before.multiplier);
        prop_assert!(after.premature || !before.premature);
        prop_assert!(after.score <= before.score);
    }

    #[test]
    fn answer_rate_and_response_turns(responding in prop::collection::vec(any::<bool>(), 1..60)) {
        let traj = trajectory(&responding);
        let rate = answer_rate(&traj).unwrap();
        prop_assert!(rate >= Rational64::from_integer(0) && rate <= Rational64::from_integer(1));
        let turns = response_turns(&traj);
        prop_assert!(turns.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(
            Rational64::from_integer(turns.len() as i64),
            rate * Rational64::from_integer(traj.len() as i64)
        );
    }

    #[test]
    fn trajectory_serde_round_trip(
        actions in prop::collection::vec(
            prop_oneof![
                (0u32..50).prop_map(|c| Action::Silent { completion_tokens: c }),
                ("[a-zA-Z0-9 ,.!?é<>\"\\\\]{1,30}", 0u32..500).prop_filter_map(
                    "non-blank",
                    |(t, c)| Action::respond(t, c).ok(),
                ),
            ],
            0..30,
        )
    ) {
        let traj = Trajectory::new("rt", actions);
        let json = serde_json::to_string(&traj).unwrap();
        let back: Trajectory = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back, traj);
    }

    #[test]
    fn far_multiplier_is_monotone_step(a in 0u32..=1000, b in 0u32..=1000) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let m_lo = far_multiplier(Rational64::new(lo as i64, 1000)).unwrap();
        let m_hi = far_multiplier(Rational64::new(hi as i64, 1000)).unwrap();
        prop_assert!(m_hi <= m_lo);
        let tiers: Vec<Rational64> = [5, 4, 3, 2, 1].iter().map(|&k| Rational64::new(k, 5)).collect();
        prop_assert!(tiers.contains(&m_lo));
        let f = far_multiplier(lo as f64 / 1000.0).unwrap();
        prop_assert!([1.0, 0.8, 0.6, 0.4, 0.2].contains(&f));
    }

    #[test]
    fn spearman_symmetry(perm in Just((1..=7u32).collect::<Vec<_>>()).prop_shuffle(),
                         other in Just((1..=7u32).collect::<Vec<_>>()).prop_shuffle()) {
        let a = RankVector::new(perm).unwrap();
        let b = RankVector::new(other).unwrap();
        prop_assert_eq!(spearman::<Rational64>(&a, &b).unwrap(), spearman::<Rational64>(&b, &a).unwrap());
        prop_assert_eq!(spearman::<Rational64>(&a, &a.reversed()).unwrap(), Rational64::from_integer(-1));
        let rho = spearman::<f64>(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&rho));
    }
}

#[test]
fn far_multiplier_right_continuous_at_steps() {
    for k in 2..=4i64 {
        let at = far_multiplier(Rational64::new(k, 5)).unwrap();
        let just_after = far_multiplier(Rational64::new(k * 1000 + 1, 5000)).unwrap();
        let just_before = far_multiplier(Rational64::new(k * 1000 - 1, 5000)).unwrap();
        assert_eq!(at, just_after);
        assert!(just_before > at);
    }
    // The 0.2 floor absorbs the last step.
    assert_eq!(
        far_multiplier(Rational64::from_integer(1)).unwrap(),
        far_multiplier(Rational64::new(4999, 5000)).unwrap()
    );
}

#[test]
fn unbiasedness_identity_on_grid() {
    let mut checked = 0;
    for i in 0..=16 {
        for j in 0..=16 {
            let (rm, rp) = (i as f64 * 0.05, j as f64 * 0.05);
            if rm + rp > 0.8 + 1e-9 {
                continue;
            }
            let noise = NoiseModel::new(rm, rp).unwrap();
            for a in 0..=10 {
                for b in 0..=10 {
                    let (l_r, l_i) = (a as f64 / 10.0, b as f64 / 10.0);
                    for truth in [Label::Relevant, Label::Irrelevant] {
                        let (l_truth, l_other) = if truth == Label::Relevant {
                            (l_r, l_i)
                        } else {
                            (l_i, l_r)
                        };
                        let flip = noise.flip_rate(truth);
                        let kept = corrected_loss(l_truth, l_other, truth, &noise).unwrap();
                        let flipped =
                            corrected_loss(l_other, l_truth, truth.flipped(), &noise).unwrap();
                        let expectation = (1.0 - flip) * kept + flip * flipped;
                        assert!((expectation - l_truth).abs() <= 1e-12);
                        checked += 1;
                    }
                }
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn noise_bounds_monotone_in_eps() {
    let mut prev_eff = f64::INFINITY;
    let mut prev_budget = 0.0;
    for k in 0..50 {
        let eps_v = k as f64 / 100.0;
        let eff = effective_samples(1000, eps_v).unwrap();
        let budget = sample_budget(10.0, eps_v, 0.1, 1.0).unwrap();
        assert!(eff < prev_eff);
        assert!(budget > prev_budget);
        prev_eff = eff;
        prev_budget = budget;
    }
}
