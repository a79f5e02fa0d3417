use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use realstream_core::{GroundTruthSpec, Mode, Reference, StreamTimeline, Subtask};
use realstream_harness::chat::{BackendError, ChatModel, ChatReply, ChatRequest};
use realstream_harness::evo::sim::{demo_videos, SimulatedVideoModel};
use realstream_harness::evo::{process_video, PipelineConfig, VideoOutcome};
use realstream_harness::session::{run_session, ScriptedBackend, SessionOptions};

fn timeline(turns: u32, queries: Vec<(u32, String)>) -> StreamTimeline {
    StreamTimeline::new(
        "causal",
        0.5,
        turns,
        queries.into_iter().collect(),
        GroundTruthSpec {
            mode: Mode::RealTimePerception,
            subtask: Subtask::Acr,
            gt_timestamps: [turns].into_iter().collect(),
            references: [(turns, Reference::answer("x"))].into_iter().collect(),
            delta: None,
            options: None,
            question: None,
            activity: None,
        },
    )
    .unwrap()
}

/// Replies depend on every visible frame and the full action history, so
/// any leak of a later frame would change an earlier turn.
fn greedy_backend(seed: u64) -> ScriptedBackend {
    ScriptedBackend::new(format!("greedy-{seed}"), move |ctx| {
        let mut h = seed;
        for f in ctx.visible_frames() {
            for b in f.bytes() {
                h = h.wrapping_mul(1_099_511_628_211).wrapping_add(b as u64);
            }
        }
        h = h.wrapping_add(ctx.history().iter().filter(|a| a.is_respond()).count() as u64);
        Ok(if h.is_multiple_of(3) {
            format!("saw {h:x}")
        } else {
            String::new()
        })
    })
}

#[test]
fn later_frames_never_change_earlier_turns() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    for case in 0..100u64 {
        let turns = rng.random_range(2..=30u32);
        let frames: Vec<String> = (0..turns)
            .map(|_| format!("frame-{}", rng.random::<u32>()))
            .collect();
        let queries = vec![(rng.random_range(1..=turns), "what now?".to_string())];
        let tl = timeline(turns, queries);
        let backend = greedy_backend(case);
        let k = rng.random_range(1..turns) as usize;
        let mut mutated = frames.clone();
        for f in mutated.iter_mut().skip(k) {
            *f = format!("mutated-{}", rng.random::<u32>());
        }
        let a = run_session(&tl, &frames, &backend, SessionOptions::default()).unwrap();
        let b = run_session(&tl, &mutated, &backend, SessionOptions::default()).unwrap();
        assert_eq!(
            a.trajectory.turns[..k],
            b.trajectory.turns[..k],
            "case {case}, k={k}"
        );
        assert_eq!(
            a.transcript[..k]
                .iter()
                .map(|e| &e.request)
                .collect::<Vec<_>>(),
            b.transcript[..k]
                .iter()
                .map(|e| &e.request)
                .collect::<Vec<_>>(),
        );
    }
}

struct Recording<M> {
    inner: M,
    prompts: Mutex<Vec<String>>,
}

impl<M: ChatModel> ChatModel for Recording<M> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, BackendError> {
        self.prompts.lock().unwrap().push(request.all_text());
        self.inner.complete(request)
    }
}

#[test]
fn decision_prompts_only_see_past_captions() {
    let videos = demo_videos();
    let model = Arc::new(Recording {
        inner: SimulatedVideoModel::new("sim", videos.clone()),
        prompts: Mutex::new(Vec::new()),
    });
    for v in &videos {
        let out = process_video(v, model.as_ref(), &PipelineConfig::default(), 0).unwrap();
        assert!(matches!(out, VideoOutcome::Record(_)));
    }
    let now = Regex::new(r"Current timestamp: segment (\d+)").unwrap();
    let caption = Regex::new(r"(?m)^\[segment (\d+) \|").unwrap();
    let prompts = model.prompts.lock().unwrap();
    let mut decisions = 0;
    for p in prompts
        .iter()
        .filter(|p| p.starts_with("Role: You are analyzing video segments"))
    {
        decisions += 1;
        let t: u32 = now.captures(p).unwrap()[1].parse().unwrap();
        for c in caption.captures_iter(p) {
            let s: u32 = c[1].parse().unwrap();
            assert!(s <= t, "segment {s} caption visible at segment {t}");
        }
    }
    assert!(decisions > 0);
}
