use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use realstream_cli::analyze;
use realstream_cli::config::{load_config, usage, ReportFormat, RunConfig};
use realstream_cli::eval::{eval_command, EvalOptions};
use realstream_cli::synth::{audit_command, synth_command, SynthOptions};
use realstream_cli::{error_code, status_code, Runtime, EXIT_OK};
use realstream_core::analysis::Label;

#[derive(Parser)]
#[command(
    name = "realstream",
    version,
    about = "Streaming video dialogue evaluation and synthesis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct JudgeFlags {
    #[arg(long)]
    judge_endpoint: Option<String>,
    #[arg(long)]
    judge_model: Option<String>,
    #[arg(long)]
    judge_concurrency: Option<usize>,
    #[arg(long, env = "REALSTREAM_JUDGE_API_KEY", hide_env_values = true)]
    judge_api_key: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or replay) sessions, judge, score and aggregate.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        judge: JudgeFlags,
        /// Score recorded trajectories instead of running the backend.
        #[arg(long)]
        from_logs: Option<PathBuf>,
        #[arg(long, value_enum)]
        report_format: Option<Format>,
    },
    /// Run one synthesis iteration.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Handoff manifest of the previous iteration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample a dataset and report per-dimension pass rates.
    Audit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        judge: JudgeFlags,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        n: Option<usize>,
    },
    #[command(subcommand)]
    Analyze(Analyze),
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Format {
    Json,
    Table,
    Both,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum LabelArg {
    Relevant,
    Irrelevant,
}

#[derive(Subcommand)]
enum Analyze {
    /// Accuracy per thousand tokens.
    Eta {
        /// Overall score in percent.
        #[arg(long)]
        accuracy: f64,
        /// Average tokens per response, in thousands.
        #[arg(long)]
        tokens: f64,
    },
    /// Rank correlation against a reference ranking.
    Spearman {
        /// JSON: {"reference": [ranks], "compare": {"name": [ranks], ...}}
        #[arg(long)]
        ranks: PathBuf,
    },
    /// Noise-corrected loss for one observed label.
    Noise {
        #[arg(long)]
        rho_minus: f64,
        #[arg(long)]
        rho_plus: f64,
        #[arg(long, default_value_t = 1.0)]
        loss_labeled: f64,
        #[arg(long, default_value_t = 0.0)]
        loss_flipped: f64,
        #[arg(long, value_enum, default_value = "relevant")]
        observed: LabelArg,
    },
    /// Clean-label equivalent of n noisy labels.
    Effective {
        #[arg(long)]
        n: u64,
        #[arg(long)]
        eps_v: f64,
    },
    /// Order-of-magnitude sample budget.
    Budget {
        #[arg(long)]
        log_covering: f64,
        #[arg(long)]
        eps_v: f64,
        #[arg(long)]
        eps: f64,
        #[arg(long, default_value_t = 1.0)]
        constant: f64,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RanksFile {
    reference: Vec<u32>,
    compare: std::collections::BTreeMap<String, Vec<u32>>,
}

fn config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn apply_judge(cfg: &mut RunConfig, flags: &JudgeFlags) {
    if let Some(e) = &flags.judge_endpoint {
        cfg.judge.endpoint = e.clone();
    }
    if let Some(m) = &flags.judge_model {
        cfg.judge.model = m.clone();
    }
    if let Some(c) = flags.judge_concurrency {
        cfg.judge_tuning.concurrency = c;
    }
    if let Some(k) = &flags.judge_api_key {
        cfg.judge.api_key = Some(k.clone());
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn spearman_file(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let file: RanksFile = serde_json::from_str(&text)
        .map_err(|e| usage(format!("invalid ranks file {}: {e}", path.display())))?;
    let reference = realstream_core::analysis::RankVector::new(file.reference)
        .map_err(|e| usage(e.to_string()))?;
    let others = file
        .compare
        .into_iter()
        .map(|(name, r)| {
            realstream_core::analysis::RankVector::new(r)
                .map(|v| (name.clone(), v))
                .map_err(|e| usage(format!("{name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    analyze::spearman_table(&reference, &others)
}

fn run(cli: Cli) -> Result<u8> {
    let rt = Runtime::default();
    match cli.command {
        Command::Eval {
            common,
            judge,
            from_logs,
            report_format,
        } => {
            let mut cfg = config(&common)?;
            apply_judge(&mut cfg, &judge);
            let opts = EvalOptions {
                from_logs,
                report_format: report_format.map(|f| match f {
                    Format::Json => ReportFormat::Json,
                    Format::Table => ReportFormat::Table,
                    Format::Both => ReportFormat::Both,
                }),
            };
            let outcome = eval_command(&cfg, &rt, &opts)?;
            print!(
                "{}",
                outcome.report.report.render_table(&outcome.report.model)
            );
            for f in &outcome.report.failures {
                eprintln!("sample {} failed: {}", f.sample_id, f.reason);
            }
            Ok(status_code(outcome.status))
        }
        Command::Synth { common, resume } => {
            let cfg = config(&common)?;
            let outcome = synth_command(
                &cfg,
                &rt,
                &SynthOptions {
                    resume,
                    generator: None,
                },
            )?;
            print_json(&serde_json::to_value(&outcome)?)?;
            Ok(status_code(outcome.status))
        }
        Command::Audit {
            common,
            judge,
            dataset,
            n,
        } => {
            let mut cfg = config(&common)?;
            apply_judge(&mut cfg, &judge);
            let report = audit_command(&cfg, &rt, &dataset, n)?;
            print_json(&serde_json::to_value(&report)?)?;
            Ok(EXIT_OK)
        }
        Command::Analyze(a) => {
            let value = match a {
                Analyze::Eta { accuracy, tokens } => analyze::eta(accuracy, tokens)?,
                Analyze::Spearman { ranks } => spearman_file(&ranks)?,
                Analyze::Noise {
                    rho_minus,
                    rho_plus,
                    loss_labeled,
                    loss_flipped,
                    observed,
                } => {
                    let observed = match observed {
                        LabelArg::Relevant => Label::Relevant,
                        LabelArg::Irrelevant => Label::Irrelevant,
                    };
                    analyze::noise(rho_minus, rho_plus, loss_labeled, loss_flipped, observed)?
                }
                Analyze::Effective { n, eps_v } => analyze::effective(n, eps_v)?,
                Analyze::Budget {
                    log_covering,
                    eps_v,
                    eps,
                    constant,
                } => analyze::budget(log_covering, eps_v, eps, constant)?,
            };
            print_json(&value)?;
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(error_code(&e))
        }
    }
}
