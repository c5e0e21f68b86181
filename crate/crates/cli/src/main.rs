use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use topicfuse::pipeline::{export_triage, Stage};
use topicfuse::stubserver::{serve, Fixture};
use topicfuse::{LoadedConfig, PipelineError};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "topicfuse", version, about = "Ensemble topic labeling with several language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one stage of the pipeline, or all of them.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "all", value_parser = parse_stage)]
        stage: Stage,
        /// Reuse or create this run directory instead of a timestamped one.
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Check a config file and print its digest.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write the review list of borderline decisions for a finished run.
    ExportTriage {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_id: Option<String>,
        /// Entries per topic and kind.
        #[arg(long, default_value_t = 20)]
        limit: usize,
    },
    /// Serve a fixture file over the chat and embedding routes.
    StubServe {
        #[arg(long)]
        fixture: PathBuf,
        #[arg(long, default_value_t = 8765)]
        port: u16,
    },
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse()
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime")
}

fn fail(err: PipelineError) -> ExitCode {
    eprintln!("error: {err}");
    let mut source = std::error::Error::source(&err);
    while let Some(s) = source {
        eprintln!("  caused by: {s}");
        source = s.source();
    }
    ExitCode::from(err.exit_code() as u8)
}

fn load(path: &Path) -> Result<LoadedConfig, PipelineError> {
    Ok(LoadedConfig::load(path)?)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            stage,
            run_id,
        } => {
            let loaded = match load(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            match runtime().block_on(topicfuse::run(loaded, stage, run_id.as_deref())) {
                Ok(summary) => {
                    for s in &summary.stages {
                        eprintln!(
                            "{}: {} network requests, {} cache hits{}",
                            s.stage,
                            s.network_requests,
                            s.cache_hits,
                            s.notes.iter().map(|n| format!("; {n}")).collect::<String>()
                        );
                    }
                    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::ValidateConfig { config } => match load(&config) {
            Ok(c) => {
                println!("config ok");
                println!("digest {}", c.digest());
                println!("backends {}", c.model_names().join(", "));
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::ExportTriage {
            config,
            run_id,
            limit,
        } => match load(&config).and_then(|c| export_triage(c, run_id.as_deref(), limit)) {
            Ok(path) => {
                println!("{}", path.display());
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::StubServe { fixture, port } => {
            let fixture = match Fixture::load(&fixture) {
                Ok(f) => f,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            runtime().block_on(async move {
                let server = match serve(fixture, port).await {
                    Ok(s) => s,
                    Err(e) => {
                        eprintln!("error: {e}");
                        return ExitCode::from(2);
                    }
                };
                eprintln!("stub server listening on {}", server.base_url());
                let _ = tokio::signal::ctrl_c().await;
                eprintln!("{} requests served", server.requests());
                server.shutdown().await;
                ExitCode::SUCCESS
            })
        }
    }
}
