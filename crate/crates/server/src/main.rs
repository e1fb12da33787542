use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use tokio::net::TcpListener;
use tracing::{error, info};
use tracing_subscriber::EnvFilter;
use wozsim_core::batch;
use wozsim_core::logging::{export_session, verify_session_dir};
use wozsim_core::scene::{render_snapshot, ScenarioLibrary};
use wozsim_server::agent_runner::{self, AgentOptions};
use wozsim_server::config::{ConfigFlags, ServerConfig};
use wozsim_server::gateway;

#[derive(Parser)]
#[command(name = "wozsim", version, about = "Situated wizard-of-oz dialogue collection server")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the server.
    Serve(ConfigFlags),
    /// Replay one sealed session directory and check it against its manifest.
    Replay {
        session_dir: PathBuf,
        /// Directory of extra scenario files used when the session was recorded
        #[arg(long)]
        scenario_dir: Option<PathBuf>,
    },
    /// Replay every sealed session under a log directory.
    Verify {
        log_dir: PathBuf,
        #[arg(long)]
        scenario_dir: Option<PathBuf>,
    },
    /// Export a sealed session as dataset turns.
    Export {
        log_dir: PathBuf,
        session_id: String,
        out_dir: PathBuf,
    },
    /// Print the initial snapshot of a scenario as SVG.
    Render {
        scenario_id: String,
        #[arg(long)]
        scenario_dir: Option<PathBuf>,
    },
    /// List the available scenarios.
    Scenarios {
        #[arg(long)]
        scenario_dir: Option<PathBuf>,
    },
    /// Connect a programmatic assistant to a running server.
    Agent {
        #[arg(long, default_value = "ws://127.0.0.1:8080/ws")]
        url: String,
        #[arg(long, default_value = "agent-1")]
        agent_id: String,
        /// Comma-separated scenario ids
        #[arg(long, value_delimiter = ',', default_value = "shopping")]
        scenarios: Vec<String>,
        #[arg(long, default_value_t = 1)]
        capacity: u32,
        /// echo or reference
        #[arg(long, default_value = "reference")]
        policy: String,
    },
}

fn library(scenario_dir: Option<&PathBuf>) -> anyhow::Result<ScenarioLibrary> {
    match scenario_dir {
        Some(dir) => {
            ScenarioLibrary::with_dir(dir).with_context(|| format!("loading scenarios from {}", dir.display()))
        }
        None => Ok(ScenarioLibrary::builtin()),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Serve(flags) => {
            let config = ServerConfig::resolve(&flags)?;
            let library = config.prepare()?;
            let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
            rt.block_on(async {
                let shutdown = shutdown_signal()?;
                let addr = config.addr()?;
                let listener = TcpListener::bind(addr)
                    .await
                    .with_context(|| format!("binding {addr}"))?;
                gateway::serve(config, library, listener, shutdown).await
            })?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Replay {
            session_dir,
            scenario_dir,
        } => {
            let v = verify_session_dir(&session_dir, &library(scenario_dir.as_ref())?)?;
            println!(
                "{} ok: {} events, version {}, digest {}, {} accepted / {} rejected commands, {} messages",
                v.session_id,
                v.event_count,
                v.final_version,
                v.final_digest.to_hex(),
                v.accepted_commands,
                v.rejected_commands,
                v.messages
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { log_dir, scenario_dir } => {
            let results = batch::verify_all(&log_dir, &library(scenario_dir.as_ref())?)?;
            let mut failed = 0;
            for (dir, result) in &results {
                match result {
                    Ok(v) => println!(
                        "ok   {} version {} digest {}",
                        v.session_id,
                        v.final_version,
                        v.final_digest.to_hex()
                    ),
                    Err(e) => {
                        failed += 1;
                        println!("FAIL {}: {e}", dir.display());
                    }
                }
            }
            println!("{} sealed sessions, {failed} failed", results.len());
            Ok(if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Export {
            log_dir,
            session_id,
            out_dir,
        } => {
            let summary = export_session(&log_dir, &session_id, &out_dir)?;
            println!(
                "exported {} turns and {} snapshots to {}",
                summary.manifest.turn_count,
                summary.snapshot_count,
                summary.out_dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Render {
            scenario_id,
            scenario_dir,
        } => {
            let library = library(scenario_dir.as_ref())?;
            let scenario = library
                .get(&scenario_id)
                .with_context(|| format!("unknown scenario {scenario_id:?}"))?;
            print!("{}", render_snapshot(&scenario.state));
            Ok(ExitCode::SUCCESS)
        }
        Command::Scenarios { scenario_dir } => {
            let library = library(scenario_dir.as_ref())?;
            for id in library.ids() {
                let s = library.get(id).expect("listed id");
                println!("{id}\t{}", s.title);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Agent {
            url,
            agent_id,
            scenarios,
            capacity,
            policy,
        } => {
            let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
            rt.block_on(agent_runner::run(AgentOptions {
                url,
                agent_id,
                scenario_ids: scenarios,
                capacity,
                policy,
            }))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Resolves on SIGINT or SIGTERM. Handlers are installed before this
/// returns, so a signal that arrives while the server starts is not lost.
#[cfg(unix)]
fn shutdown_signal() -> anyhow::Result<impl std::future::Future<Output = ()>> {
    use tokio::signal::unix::{signal, SignalKind};
    let mut int = signal(SignalKind::interrupt()).context("installing SIGINT handler")?;
    let mut term = signal(SignalKind::terminate()).context("installing SIGTERM handler")?;
    Ok(async move {
        tokio::select! {
            _ = int.recv() => {},
            _ = term.recv() => {},
        }
        info!("shutdown signal received");
    })
}

#[cfg(not(unix))]
fn shutdown_signal() -> anyhow::Result<impl std::future::Future<Output = ()>> {
    Ok(async {
        let _ = tokio::signal::ctrl_c().await;
        info!("shutdown signal received");
    })
}
