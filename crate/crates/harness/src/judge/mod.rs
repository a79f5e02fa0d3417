//! LLM judge: prompt rendering, cached verdicts and per-sample protocol.

mod verdict;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use realstream_core::timeline::response_turns;
use realstream_core::{Mode, StreamTimeline, Subtask, Trajectory, Turn, VerdictBundle};

use crate::cache::{cache_key, ContentCache};
use crate::chat::{ChatModel, ChatRequest};
use crate::pool::{bounded_pool, map_ordered};
use crate::template::TemplateError;

pub use verdict::{
    first_json_with_key, parse_verdict, snap_to_rubric, JudgeVerdict, ParseStatus, TemplateId,
    VerdictKind, VerdictValue,
};

/// A template together with its filled slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgePrompt {
    pub template: TemplateId,
    pub slots: BTreeMap<String, String>,
}

impl JudgePrompt {
    pub fn new<K: Into<String>, V: Into<String>>(
        template: TemplateId,
        slots: impl IntoIterator<Item = (K, V)>,
    ) -> Self {
        JudgePrompt {
            template,
            slots: slots
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
        }
    }

    pub fn render(&self) -> Result<String, TemplateError> {
        let values: BTreeMap<&str, &str> = self
            .slots
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_str()))
            .collect();
        self.template.template().render(&values)
    }
}

pub fn render_prompt(
    template: TemplateId,
    slots: &BTreeMap<&str, String>,
) -> Result<String, TemplateError> {
    template.template().render(slots)
}

/// How forward-active consistency scores enter the quality term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FarScale {
    /// Rubric `[0, 0.5]` doubled onto `[0, 1]`.
    #[default]
    Doubled,
    Raw,
}

impl FarScale {
    pub fn apply(self, score: f64) -> f64 {
        match self {
            FarScale::Doubled => 2.0 * score,
            FarScale::Raw => score,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeSettings {
    pub far_scale: FarScale,
    /// Most recent response turns shown to the repetition judge.
    pub repetition_context: usize,
    /// Extra attempts after an unparseable reply.
    pub parse_retries: u32,
    pub concurrency: usize,
    pub max_tokens: u32,
    pub far_delta_default: u32,
}

impl Default for JudgeSettings {
    fn default() -> Self {
        JudgeSettings {
            far_scale: FarScale::Doubled,
            repetition_context: 20,
            parse_retries: 1,
            concurrency: 8,
            max_tokens: 256,
            far_delta_default: realstream_core::timeline::DEFAULT_FAR_DELTA,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CachedVerdict {
    model: String,
    prompt: String,
    verdict: JudgeVerdict,
}

/// Thread-safe judge front end. Verdicts are cached on disk keyed by the
/// judge model id and the rendered prompt.
pub struct JudgeClient {
    model: Arc<dyn ChatModel>,
    cache: Option<Arc<ContentCache>>,
    settings: JudgeSettings,
    pool: Arc<ThreadPool>,
}

impl JudgeClient {
    pub fn new(
        model: Arc<dyn ChatModel>,
        cache: Option<Arc<ContentCache>>,
        settings: JudgeSettings,
    ) -> Self {
        let pool = Arc::new(bounded_pool(settings.concurrency));
        JudgeClient {
            model,
            cache,
            settings,
            pool,
        }
    }

    pub fn model_id(&self) -> &str {
        self.model.id()
    }

    pub fn settings(&self) -> &JudgeSettings {
        &self.settings
    }

    pub fn judge(&self, prompt: &JudgePrompt) -> Result<JudgeVerdict, TemplateError> {
        let text = prompt.render()?;
        Ok(self.judge_text(prompt.template, &text))
    }

    /// Judges an already rendered prompt.
    pub fn judge_text(&self, template: TemplateId, text: &str) -> JudgeVerdict {
        let key = cache_key(self.model.id(), text);
        if let Some(hit) = self
            .cache
            .as_ref()
            .and_then(|c| c.get::<CachedVerdict>(&key))
        {
            if hit.verdict.template == template {
                return hit.verdict;
            }
        }
        let request = ChatRequest::single_user(text)
            .with_max_tokens(self.settings.max_tokens)
            .with_temperature(0.0);
        let mut verdict = None;
        for attempt in 0..=self.settings.parse_retries {
            match self.model.complete(&request) {
                Ok(reply) => {
                    let parsed = parse_verdict(template, &reply.content);
                    let done = parsed.is_ok();
                    verdict = Some(parsed);
                    if done {
                        break;
                    }
                    log::debug!("{template} reply unparseable (attempt {})", attempt + 1);
                }
                Err(e) => {
                    log::warn!("judge call {template} failed: {e}");
                    return JudgeVerdict::failed(
                        template,
                        e.to_string(),
                        ParseStatus::TransportFailed,
                    );
                }
            }
        }
        let verdict = verdict.expect("at least one attempt");
        if let Some(cache) = &self.cache {
            let record = CachedVerdict {
                model: self.model.id().to_string(),
                prompt: text.to_string(),
                verdict: verdict.clone(),
            };
            if let Err(e) = cache.put(&key, &record) {
                log::warn!("failed to cache verdict {key}: {e}");
            }
        }
        verdict
    }

    /// Runs the judge protocol for one sample and assembles the verdict
    /// bundle scoring needs. Judge failures map to conservative values and
    /// never abort the sample.
    pub fn judge_sample(&self, timeline: &StreamTimeline, traj: &Trajectory) -> SampleJudgement {
        match timeline.mode() {
            Mode::ForwardActive => self.judge_forward(timeline, traj),
            _ => self.judge_perception(timeline, traj),
        }
    }

    fn run(&self, planned: Vec<PlannedCall>) -> Vec<JudgeCall> {
        map_ordered(&self.pool, &planned, |p| JudgeCall {
            template: p.prompt.template,
            gt_turn: p.gt_turn,
            turn: p.turn,
            verdict: self.judge_text(p.prompt.template, &p.text),
        })
    }

    fn judge_perception(&self, timeline: &StreamTimeline, traj: &Trajectory) -> SampleJudgement {
        let gt = timeline.ground_truth();
        let responses: BTreeSet<Turn> = response_turns(traj).into_iter().collect();
        let mut planned = Vec::new();
        for &g in &gt.gt_timestamps {
            if !responses.contains(&g) {
                continue;
            }
            let answer = traj.action(g).and_then(|a| a.text()).unwrap_or_default();
            let prompt = accuracy_prompt(timeline, g, answer);
            planned.push(PlannedCall::new(prompt, Some(g), Some(g)));
        }
        if !responses.is_empty() {
            let prompt = repetition_prompt(timeline, traj, self.settings.repetition_context);
            planned.push(PlannedCall::new(prompt, None, None));
        }
        let calls = self.run(planned);
        let mut bundle = VerdictBundle::default();
        for call in &calls {
            match call.template {
                TemplateId::Accuracy => {
                    let v = if call.verdict.correct() { 1.0 } else { 0.0 };
                    bundle
                        .pair_scores
                        .insert((call.gt_turn.unwrap(), call.turn.unwrap()), v);
                }
                TemplateId::Repetition => bundle.repetition = Some(call.verdict.repeated()),
                _ => unreachable!("perception samples only use accuracy and repetition"),
            }
        }
        SampleJudgement { bundle, calls }
    }

    fn judge_forward(&self, timeline: &StreamTimeline, traj: &Trajectory) -> SampleJudgement {
        let gt = timeline.ground_truth();
        let delta = gt.effective_delta(self.settings.far_delta_default);
        let windows_of = |t: Turn| -> Vec<Turn> {
            gt.gt_timestamps
                .iter()
                .copied()
                .filter(|&g| (t as i64 - g as i64).abs() <= delta as i64)
                .collect()
        };
        let in_window: Vec<Turn> = response_turns(traj)
            .into_iter()
            .filter(|&t| !windows_of(t).is_empty())
            .collect();

        let gates: Vec<PlannedCall> = in_window
            .iter()
            .map(|&t| {
                let content = traj.action(t).and_then(|a| a.text()).unwrap_or_default();
                PlannedCall::new(intention_prompt(timeline, t, content), None, Some(t))
            })
            .collect();
        let mut calls = self.run(gates);

        let mut bundle = VerdictBundle::default();
        let mut planned = Vec::new();
        for call in &calls {
            let t = call.turn.unwrap();
            if !call.verdict.intention() {
                bundle.gated_turns.insert(t);
                continue;
            }
            let content = traj.action(t).and_then(|a| a.text()).unwrap_or_default();
            for g in windows_of(t) {
                planned.push(PlannedCall::new(
                    consistency_prompt(timeline, g, content),
                    Some(g),
                    Some(t),
                ));
            }
        }
        let scored = self.run(planned);
        for call in &scored {
            let value = self.settings.far_scale.apply(call.verdict.consistency());
            bundle
                .pair_scores
                .insert((call.gt_turn.unwrap(), call.turn.unwrap()), value);
        }
        calls.extend(scored);
        SampleJudgement { bundle, calls }
    }
}

struct PlannedCall {
    prompt: JudgePrompt,
    text: String,
    gt_turn: Option<Turn>,
    turn: Option<Turn>,
}

impl PlannedCall {
    fn new(prompt: JudgePrompt, gt_turn: Option<Turn>, turn: Option<Turn>) -> Self {
        let text = prompt
            .render()
            .expect("protocol prompts fill every slot of their template");
        PlannedCall {
            prompt,
            text,
            gt_turn,
            turn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeCall {
    pub template: TemplateId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_turn: Option<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn: Option<Turn>,
    pub verdict: JudgeVerdict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleJudgement {
    pub bundle: VerdictBundle<f64>,
    pub calls: Vec<JudgeCall>,
}

impl SampleJudgement {
    /// Calls whose judge could not be reached.
    pub fn transport_failures(&self) -> usize {
        self.calls
            .iter()
            .filter(|c| c.verdict.status == ParseStatus::TransportFailed)
            .count()
    }

    pub fn parse_failures(&self) -> usize {
        self.calls
            .iter()
            .filter(|c| c.verdict.status == ParseStatus::Failed)
            .count()
    }
}

fn question_text(timeline: &StreamTimeline, gt_turn: Turn) -> String {
    timeline
        .question_for(gt_turn)
        .unwrap_or_default()
        .to_string()
}

fn reference(timeline: &StreamTimeline, gt_turn: Turn) -> &realstream_core::Reference {
    &timeline.ground_truth().references[&gt_turn]
}

pub fn accuracy_prompt(timeline: &StreamTimeline, gt_turn: Turn, answer: &str) -> JudgePrompt {
    let gt = timeline.ground_truth();
    let options = gt
        .options
        .as_ref()
        .map(|o| o.join("; "))
        .unwrap_or_else(|| "N/A".to_string());
    JudgePrompt::new(
        TemplateId::Accuracy,
        [
            ("task_name", gt.subtask.full_name().to_string()),
            ("task", gt.subtask.code().to_string()),
            ("question", question_text(timeline, gt_turn)),
            ("options", options),
            ("ground_truth", reference(timeline, gt_turn).answer.clone()),
            ("model_answer", answer.to_string()),
        ],
    )
}

/// Dialogue of the most recent `keep` responding turns, with the query
/// issued at each of those turns when there was one.
pub fn repetition_context(timeline: &StreamTimeline, traj: &Trajectory, keep: usize) -> String {
    let turns = response_turns(traj);
    let start = turns.len().saturating_sub(keep);
    let mut lines = Vec::new();
    for &t in &turns[start..] {
        if let Some(q) = timeline.query_at(t) {
            lines.push(format!("[turn {t}] User: {q}"));
        }
        let text = traj.action(t).and_then(|a| a.text()).unwrap_or_default();
        lines.push(format!("[turn {t}] Model: {text}"));
    }
    lines.join("\n")
}

pub fn repetition_prompt(timeline: &StreamTimeline, traj: &Trajectory, keep: usize) -> JudgePrompt {
    let mut answers: Vec<&str> = Vec::new();
    for r in timeline.ground_truth().references.values() {
        if !answers.contains(&r.answer.as_str()) {
            answers.push(&r.answer);
        }
    }
    JudgePrompt::new(
        TemplateId::Repetition,
        [
            ("context_text", repetition_context(timeline, traj, keep)),
            ("ground_truth", answers.join(" | ")),
        ],
    )
}

pub fn intention_prompt(timeline: &StreamTimeline, turn: Turn, content: &str) -> JudgePrompt {
    match timeline.ground_truth().subtask {
        Subtask::Crr => {
            let question = timeline
                .ground_truth()
                .gt_timestamps
                .iter()
                .next()
                .map(|&g| question_text(timeline, g))
                .or_else(|| timeline.query_at(turn).map(str::to_string))
                .unwrap_or_default();
            JudgePrompt::new(
                TemplateId::CrrIntention,
                [("question", question), ("content", content.to_string())],
            )
        }
        _ => JudgePrompt::new(
            TemplateId::SsrRecIntention,
            [("content", content.to_string())],
        ),
    }
}

pub fn consistency_prompt(
    timeline: &StreamTimeline,
    gt_turn: Turn,
    prediction: &str,
) -> JudgePrompt {
    let gt = timeline.ground_truth();
    let r = reference(timeline, gt_turn);
    match gt.subtask {
        Subtask::Ssr => JudgePrompt::new(
            TemplateId::FarSsr,
            [
                (
                    "reference",
                    r.stage.clone().unwrap_or_else(|| r.answer.clone()),
                ),
                ("prediction", prediction.to_string()),
            ],
        ),
        Subtask::Rec => JudgePrompt::new(
            TemplateId::FarRec,
            [
                (
                    "activity",
                    gt.activity
                        .clone()
                        .unwrap_or_else(|| question_text(timeline, gt_turn)),
                ),
                (
                    "expected_count",
                    r.count.map_or_else(|| r.answer.clone(), |c| c.to_string()),
                ),
                ("prediction", prediction.to_string()),
            ],
        ),
        _ => JudgePrompt::new(
            TemplateId::FarCrr,
            [
                ("question", question_text(timeline, gt_turn)),
                ("answer", r.answer.clone()),
                ("prediction", prediction.to_string()),
            ],
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chat::ScriptedChatModel;
    use realstream_core::scoring::{score_sample, ScoringParams};
    use realstream_core::{Action, GroundTruthSpec, Reference};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    fn timeline(
        subtask: Subtask,
        t: u32,
        gts: &[(Turn, Reference)],
        queries: &[(Turn, &str)],
    ) -> StreamTimeline {
        StreamTimeline::new(
            "s1",
            0.5,
            t,
            queries.iter().map(|&(t, q)| (t, q.to_string())).collect(),
            GroundTruthSpec {
                mode: subtask.mode(),
                subtask,
                gt_timestamps: gts.iter().map(|(t, _)| *t).collect(),
                references: gts.iter().cloned().collect(),
                delta: None,
                options: None,
                question: None,
                activity: Some("jumping".into()),
            },
        )
        .unwrap()
    }

    fn traj(t: u32, responses: &[(Turn, &str)]) -> Trajectory {
        let mut turns = vec![Action::silent(); t as usize];
        for &(at, text) in responses {
            turns[(at - 1) as usize] = Action::respond(text, 4).unwrap();
        }
        Trajectory::new("s1", turns)
    }

    /// Judge that answers by template and logs every prompt.
    fn judge_model(log: Arc<Mutex<Vec<String>>>) -> Arc<dyn ChatModel> {
        Arc::new(ScriptedChatModel::new("judge", move |req| {
            let text = req.all_text();
            log.lock().unwrap().push(text.clone());
            if text.starts_with("You are an expert evaluator") {
                "{\"correct\": true, \"reasoning\": \"ok\"}".into()
            } else if text.starts_with("You are checking for repetitive") {
                "{\"is_repeated\": false, \"reasoning\": \"once\"}".into()
            } else if text.contains("Does this output") {
                if text.contains("I don't know") {
                    "no".into()
                } else {
                    "yes".into()
                }
            } else if text.starts_with("Activity being counted") {
                "0.3".into()
            } else {
                "0.5".into()
            }
        }))
    }

    #[test]
    fn rtvp_one_response_two_calls() {
        let log = Arc::new(Mutex::new(Vec::new()));
        let client = JudgeClient::new(judge_model(log.clone()), None, JudgeSettings::default());
        let tl = timeline(
            Subtask::Ojr,
            6,
            &[(3, Reference::answer("a red cup"))],
            &[(3, "What is on the table?")],
        );
        let tr = traj(6, &[(3, "A red cup.")]);
        let j = client.judge_sample(&tl, &tr);
        assert_eq!(j.calls.len(), 2);
        assert_eq!(log.lock().unwrap().len(), 2);
        assert_eq!(j.bundle.pair_scores[&(3, 3)], 1.0);
        assert_eq!(j.bundle.repetition, Some(false));
        let s = score_sample(&tl, &tr, &j.bundle, &ScoringParams::default()).unwrap();
        assert_eq!(s.score, 1.0);
    }

    #[test]
    fn crr_refusal_is_gated_without_consistency_call() {
        let log = Arc::new(Mutex::new(Vec::new()));
        let client = JudgeClient::new(judge_model(log.clone()), None, JudgeSettings::default());
        let tl = timeline(
            Subtask::Crr,
            20,
            &[(10, Reference::answer("the lid opens"))],
            &[(1, "Why will it spill?")],
        );
        let tr = traj(20, &[(9, "I don't know")]);
        let j = client.judge_sample(&tl, &tr);
        assert_eq!(j.calls.len(), 1);
        assert_eq!(j.calls[0].template, TemplateId::CrrIntention);
        assert!(j.bundle.gated_turns.contains(&9));
        let s = score_sample(&tl, &tr, &j.bundle, &ScoringParams::default()).unwrap();
        assert_eq!(s.quality, 0.0);
    }

    #[test]
    fn rec_off_by_one_doubles_to_point_six() {
        let log = Arc::new(Mutex::new(Vec::new()));
        let client = JudgeClient::new(judge_model(log.clone()), None, JudgeSettings::default());
        let r = Reference {
            answer: "4".into(),
            count: Some(4),
            stage: None,
        };
        let tl = timeline(Subtask::Rec, 20, &[(12, r)], &[]);
        let tr = traj(20, &[(12, "the person has jumped 3 times")]);
        let j = client.judge_sample(&tl, &tr);
        let templates: Vec<_> = j.calls.iter().map(|c| c.template).collect();
        assert_eq!(
            templates,
            vec![TemplateId::SsrRecIntention, TemplateId::FarRec]
        );
        assert_eq!(j.bundle.pair_scores[&(12, 12)], 0.6);
        let prompts = log.lock().unwrap();
        assert!(prompts[1].contains("Expected count at this point: 4\n"));
        assert!(prompts[1].contains("has occurred 4 time(s)."));

        let raw = JudgeClient::new(
            judge_model(Arc::new(Mutex::new(Vec::new()))),
            None,
            JudgeSettings {
                far_scale: FarScale::Raw,
                ..JudgeSettings::default()
            },
        );
        assert_eq!(
            raw.judge_sample(&tl, &tr).bundle.pair_scores[&(12, 12)],
            0.3
        );
    }

    #[test]
    fn out_of_window_far_responses_are_not_judged() {
        let log = Arc::new(Mutex::new(Vec::new()));
        let client = JudgeClient::new(judge_model(log.clone()), None, JudgeSettings::default());
        let tl = timeline(Subtask::Ssr, 40, &[(30, Reference::answer("cutting"))], &[]);
        let tr = traj(40, &[(2, "mixing"), (28, "now cutting")]);
        let j = client.judge_sample(&tl, &tr);
        assert_eq!(j.calls.len(), 2);
        assert!(j.calls.iter().all(|c| c.turn == Some(28)));
        let s = score_sample(&tl, &tr, &j.bundle, &ScoringParams::default()).unwrap();
        assert!(s.premature);
        assert!((s.score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn cache_hit_means_no_model_call() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(ContentCache::open(dir.path()).unwrap());
        let calls = Arc::new(AtomicUsize::new(0));
        let c = calls.clone();
        let model: Arc<dyn ChatModel> = Arc::new(ScriptedChatModel::new("j", move |_| {
            c.fetch_add(1, Ordering::SeqCst);
            "yes".into()
        }));
        let client = JudgeClient::new(model, Some(cache), JudgeSettings::default());
        let p = JudgePrompt::new(TemplateId::SsrRecIntention, [("content", "a dog runs")]);
        assert!(client.judge(&p).unwrap().intention());
        assert!(client.judge(&p).unwrap().intention());
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn parse_retry_then_failure_is_conservative() {
        let calls = Arc::new(AtomicUsize::new(0));
        let c = calls.clone();
        let model: Arc<dyn ChatModel> = Arc::new(ScriptedChatModel::new("j", move |_| {
            c.fetch_add(1, Ordering::SeqCst);
            "maybe".into()
        }));
        let client = JudgeClient::new(model, None, JudgeSettings::default());
        let v = client
            .judge(&JudgePrompt::new(
                TemplateId::CrrIntention,
                [("question", "q"), ("content", "c")],
            ))
            .unwrap();
        assert_eq!(v.status, ParseStatus::Failed);
        assert!(!v.intention());
        assert_eq!(calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn missing_slot_is_reported() {
        let client = JudgeClient::new(
            judge_model(Arc::new(Mutex::new(Vec::new()))),
            None,
            JudgeSettings::default(),
        );
        let err = client
            .judge(&JudgePrompt::new(TemplateId::FarSsr, [("prediction", "x")]))
            .unwrap_err();
        assert_eq!(
            err,
            TemplateError::MissingSlot {
                template: "C6-far-ssr".into(),
                slot: "reference".into()
            }
        );
    }

    #[test]
    fn repetition_context_keeps_latest_turns() {
        let tl = timeline(
            Subtask::Ojr,
            30,
            &[(3, Reference::answer("red"))],
            &[(3, "colour?")],
        );
        let responses: Vec<(Turn, String)> = (1..=25).map(|t| (t, format!("r{t}"))).collect();
        let refs: Vec<(Turn, &str)> = responses.iter().map(|(t, s)| (*t, s.as_str())).collect();
        let ctx = repetition_context(&tl, &traj(30, &refs), 20);
        assert!(!ctx.contains("Model: r5\n"));
        assert!(ctx.starts_with("[turn 6] Model: r6"));
        assert!(ctx.ends_with("[turn 25] Model: r25"));
    }
}
