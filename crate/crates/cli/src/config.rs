//! Run configuration: one TOML document, strictly validated.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use realstream_harness::chat::{EndpointConfig, RetryPolicy};
use realstream_harness::evo::export::ExportFilters;
use realstream_harness::evo::PipelineConfig;
use realstream_harness::judge::{FarScale, JudgeSettings};
use realstream_harness::session::{GenerationParams, DEFAULT_SYSTEM_PROMPT};

/// Configuration mistakes; these map to exit code 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Table,
    #[default]
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// OpenAI-compatible chat completions endpoint.
    #[default]
    Http,
    /// Session backend that never responds.
    ScriptedSilent,
    /// Session backend answering `reply` whenever a query arrives.
    ScriptedOnQuery,
    /// Judge that accepts every answer; for offline smoke runs.
    Lenient,
    /// Synthetic-video simulator for the synthesis pipeline.
    Sim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub endpoint: String,
    pub model: String,
    /// May be `${VAR}` to read from the environment.
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub timeout_s: u64,
    pub max_retries: u32,
    /// Reply of the `scripted-on-query` backend.
    pub reply: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Http,
            endpoint: String::new(),
            model: String::new(),
            api_key: None,
            timeout_s: 120,
            max_retries: 2,
            reply: String::new(),
        }
    }
}

impl ModelConfig {
    pub fn endpoint_config(&self) -> EndpointConfig {
        let mut c = EndpointConfig::new(self.endpoint.clone(), self.model.clone());
        c.api_key = self.api_key.clone();
        c.timeout = Duration::from_secs(self.timeout_s);
        c.retry = RetryPolicy {
            max_retries: self.max_retries,
            ..RetryPolicy::default()
        };
        c
    }

    fn validate(&self, section: &str, allowed: &[ModelKind]) -> Result<()> {
        if !allowed.contains(&self.kind) {
            return Err(usage(format!(
                "{section}.kind {:?} is not usable here",
                self.kind
            )));
        }
        if self.kind == ModelKind::Http {
            if self.endpoint.trim().is_empty() {
                return Err(usage(format!(
                    "{section}.endpoint must be set for kind = \"http\""
                )));
            }
            if self.model.trim().is_empty() {
                return Err(usage(format!(
                    "{section}.model must be set for kind = \"http\""
                )));
            }
            if self.timeout_s == 0 {
                return Err(usage(format!("{section}.timeout_s must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub max_tokens: u32,
    pub temperature: f32,
    /// Visual token budget per frame (128 or 768 in the reference setups).
    pub tokens_per_frame: u32,
    pub system_prompt: Option<String>,
    pub max_context_turns: Option<u32>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        let g = GenerationParams::default();
        GenerationConfig {
            max_tokens: g.max_tokens,
            temperature: g.temperature,
            tokens_per_frame: g.tokens_per_frame,
            system_prompt: None,
            max_context_turns: None,
        }
    }
}

impl GenerationConfig {
    pub fn generation(&self) -> GenerationParams {
        GenerationParams {
            max_tokens: self.max_tokens,
            temperature: self.temperature,
            tokens_per_frame: self.tokens_per_frame,
            system_prompt: self
                .system_prompt
                .clone()
                .unwrap_or_else(|| DEFAULT_SYSTEM_PROMPT.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeTuning {
    pub far_scale: FarScale,
    pub repetition_context: usize,
    pub parse_retries: u32,
    pub concurrency: usize,
    pub max_tokens: u32,
}

impl Default for JudgeTuning {
    fn default() -> Self {
        let s = JudgeSettings::default();
        JudgeTuning {
            far_scale: s.far_scale,
            repetition_context: s.repetition_context,
            parse_retries: s.parse_retries,
            concurrency: s.concurrency,
            max_tokens: s.max_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub videos: Option<PathBuf>,
    pub iterations: u32,
    pub generator: ModelConfig,
    pub segment_seconds: f64,
    pub max_questions: usize,
    pub caption_cap: usize,
    pub drop_all_silent: bool,
    pub max_records: Option<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        SynthConfig {
            videos: None,
            iterations: 1,
            generator: ModelConfig::default(),
            segment_seconds: p.segment_seconds,
            max_questions: p.max_questions,
            caption_cap: p.caption_cap,
            drop_all_silent: p.filters.drop_all_silent,
            max_records: p.filters.max_records,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    pub n: usize,
    /// Ask the judge model for the three model-assisted dimensions.
    pub use_judge: bool,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            n: 50,
            use_judge: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub benchmark: Option<PathBuf>,
    pub fps: f64,
    pub far_delta: u32,
    pub premature_penalty: f64,
    pub seed: u64,
    pub cache_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub report_format: ReportFormat,
    pub session_parallelism: usize,
    pub backend: ModelConfig,
    pub generation: GenerationConfig,
    pub judge: ModelConfig,
    pub judge_tuning: JudgeTuning,
    pub synth: SynthConfig,
    pub audit: AuditConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            benchmark: None,
            fps: realstream_core::timeline::DEFAULT_FPS,
            far_delta: realstream_core::timeline::DEFAULT_FAR_DELTA,
            premature_penalty: 0.1,
            seed: 0,
            cache_dir: None,
            out_dir: PathBuf::from("out"),
            report_format: ReportFormat::Both,
            session_parallelism: 4,
            backend: ModelConfig::default(),
            generation: GenerationConfig::default(),
            judge: ModelConfig::default(),
            judge_tuning: JudgeTuning::default(),
            synth: SynthConfig::default(),
            audit: AuditConfig::default(),
        }
    }
}

/// Replaces a whole-value `${VAR}` with the variable's value.
fn interpolate(field: &str, value: &mut Option<String>) -> Result<()> {
    let Some(v) = value.as_ref() else {
        return Ok(());
    };
    let t = v.trim();
    if let Some(name) = t.strip_prefix("${").and_then(|r| r.strip_suffix('}')) {
        let resolved = std::env::var(name).map_err(|_| {
            usage(format!(
                "{field} refers to unset environment variable {name}"
            ))
        })?;
        *value = Some(resolved);
    }
    Ok(())
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| usage(format!("invalid config: {}", e.message())))
    }

    /// Checks fields every command relies on. Model sections are checked
    /// by the command that uses them.
    pub fn validate(&self) -> Result<()> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(usage("fps must be positive"));
        }
        if !(0.0..=1.0).contains(&self.premature_penalty) {
            return Err(usage("premature_penalty must lie in [0, 1]"));
        }
        if self.session_parallelism == 0 {
            return Err(usage("session_parallelism must be at least 1"));
        }
        if self.generation.tokens_per_frame == 0 {
            return Err(usage("generation.tokens_per_frame must be positive"));
        }
        if self.generation.max_tokens == 0 {
            return Err(usage("generation.max_tokens must be positive"));
        }
        if self.judge_tuning.concurrency == 0 {
            return Err(usage("judge_tuning.concurrency must be at least 1"));
        }
        if self.synth.iterations == 0 {
            return Err(usage("synth.iterations must be at least 1"));
        }
        self.pipeline()
            .validate()
            .map_err(|e| usage(format!("synth: {e}")))?;
        if self.audit.n == 0 {
            return Err(usage("audit.n must be at least 1"));
        }
        Ok(())
    }

    pub fn validate_backend(&self) -> Result<()> {
        self.backend.validate(
            "backend",
            &[
                ModelKind::Http,
                ModelKind::ScriptedSilent,
                ModelKind::ScriptedOnQuery,
            ],
        )
    }

    pub fn validate_judge(&self) -> Result<()> {
        self.judge
            .validate("judge", &[ModelKind::Http, ModelKind::Lenient])
    }

    pub fn validate_generator(&self) -> Result<()> {
        self.synth
            .generator
            .validate("synth.generator", &[ModelKind::Http, ModelKind::Sim])
    }

    pub fn judge_settings(&self) -> JudgeSettings {
        JudgeSettings {
            far_scale: self.judge_tuning.far_scale,
            repetition_context: self.judge_tuning.repetition_context,
            parse_retries: self.judge_tuning.parse_retries,
            concurrency: self.judge_tuning.concurrency,
            max_tokens: self.judge_tuning.max_tokens,
            far_delta_default: self.far_delta,
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            segment_seconds: self.synth.segment_seconds,
            max_questions: self.synth.max_questions,
            caption_cap: self.synth.caption_cap,
            parallelism: self.session_parallelism,
            filters: ExportFilters {
                drop_all_silent: self.synth.drop_all_silent,
                max_records: self.synth.max_records,
            },
            system_prompt: self.generation.system_prompt.clone(),
        }
    }

    /// Stable hash of the effective configuration. Secrets are excluded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        crate::sha256_hex(&json)
    }
}

/// Reads, interpolates, resolves relative paths against the file's
/// directory, and validates.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg = RunConfig::parse(&text).with_context(|| format!("in {}", path.display()))?;
    interpolate("backend.api_key", &mut cfg.backend.api_key)?;
    interpolate("judge.api_key", &mut cfg.judge.api_key)?;
    interpolate("synth.generator.api_key", &mut cfg.synth.generator.api_key)?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    for p in [
        &mut cfg.benchmark,
        &mut cfg.cache_dir,
        &mut cfg.synth.videos,
    ]
    .into_iter()
    .flatten()
    {
        resolve(&base, p);
    }
    resolve(&base, &mut cfg.out_dir);
    cfg.validate()?;
    for (field, p) in [
        ("benchmark", &cfg.benchmark),
        ("synth.videos", &cfg.synth.videos),
    ] {
        if let Some(p) = p {
            if !p.exists() {
                return Err(usage(format!(
                    "{field} path {} does not exist",
                    p.display()
                )));
            }
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err(text: &str) -> String {
        match RunConfig::parse(text).and_then(|c| c.validate().map(|_| c)) {
            Ok(_) => panic!("accepted {text:?}"),
            Err(e) => e.to_string(),
        }
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::parse("").unwrap();
        c.validate().unwrap();
        assert_eq!(c.fps, 0.5);
        assert_eq!(c.far_delta, 5);
        assert_eq!(c.premature_penalty, 0.1);
        assert_eq!(c.generation.tokens_per_frame, 768);
        assert_eq!(c.judge_tuning.far_scale, FarScale::Doubled);
        assert_eq!(c.audit.n, 50);
        assert_eq!(c.synth.iterations, 1);
    }

    #[test]
    fn validation_names_the_field() {
        assert!(err("fps = 0").contains("fps must be positive"));
        assert!(err("ffps = 1").contains("ffps"));
        assert!(err("[generation]\ntokens_per_frame = 0").contains("generation.tokens_per_frame"));
        assert!(err("[judge_tuning]\nfar_scale = \"tripled\"").contains("tripled"));
        assert!(err("[backend]\nkind = \"http\"\nendpooint = \"x\"").contains("endpooint"));
        let c = RunConfig::parse("[backend]\nmodel = \"m\"").unwrap();
        assert!(c
            .validate_backend()
            .unwrap_err()
            .to_string()
            .contains("backend.endpoint"));
        let c = RunConfig::parse("[backend]\nkind = \"sim\"").unwrap();
        assert!(c
            .validate_backend()
            .unwrap_err()
            .to_string()
            .contains("backend.kind"));
    }

    #[test]
    fn secrets_come_from_env() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[judge]\nendpoint = \"http://x\"\nmodel = \"j\"\napi_key = \"${REALSTREAM_TEST_KEY_UNSET}\"").unwrap();
        let e = load_config(&path).unwrap_err().to_string();
        assert!(e.contains("REALSTREAM_TEST_KEY_UNSET"), "{e}");
        std::env::set_var("REALSTREAM_TEST_KEY_SET", "sk-1");
        std::fs::write(&path, "[judge]\nendpoint = \"http://x\"\nmodel = \"j\"\napi_key = \"${REALSTREAM_TEST_KEY_SET}\"").unwrap();
        let c = load_config(&path).unwrap();
        assert_eq!(c.judge.api_key.as_deref(), Some("sk-1"));
        assert_eq!(c.out_dir, dir.path().join("out"));
        assert!(!serde_json::to_string(&c).unwrap().contains("sk-1"));
    }
}
