use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use realstream_cli::config::{load_config, ModelConfig, ModelKind, RunConfig};
use realstream_cli::synth::{synth_command, SynthOptions};
use realstream_cli::{error_code, status_code, Runtime};

#[derive(Parser)]
#[command(
    name = "evo",
    version,
    about = "Iterative streaming-dialogue trajectory synthesis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the next pending iteration and write its dataset and handoff manifest.
    Run {
        /// Directory of video JSON files, or a JSON/JSONL list.
        #[arg(long)]
        videos: PathBuf,
        #[arg(long, default_value_t = 1)]
        iterations: u32,
        /// Chat completions URL, or `sim` for the offline simulator.
        #[arg(long)]
        backend: String,
        #[arg(long, default_value = "")]
        model: String,
        #[arg(long, env = "REALSTREAM_API_KEY", hide_env_values = true)]
        api_key: Option<String>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        /// TOML run configuration for the remaining settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<u8> {
    let Command::Run {
        videos,
        iterations,
        backend,
        model,
        api_key,
        resume,
        out,
        cache_dir,
        config,
    } = cli.command;
    let mut cfg = match &config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    cfg.synth.videos = Some(videos);
    cfg.synth.iterations = iterations;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    if cache_dir.is_some() {
        cfg.cache_dir = cache_dir;
    }
    let generator = if backend == "sim" {
        ModelConfig {
            kind: ModelKind::Sim,
            model,
            ..ModelConfig::default()
        }
    } else {
        ModelConfig {
            kind: ModelKind::Http,
            endpoint: backend,
            model,
            api_key,
            ..cfg.synth.generator.clone()
        }
    };
    let outcome = synth_command(
        &cfg,
        &Runtime::default(),
        &SynthOptions {
            resume,
            generator: Some(generator),
        },
    )?;
    println!("{}", serde_json::to_string_pretty(&outcome)?);
    Ok(status_code(outcome.status))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(error_code(&e))
        }
    }
}
