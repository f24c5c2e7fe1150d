use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dqaf_client::{Client, ClientError};
use dqaf_core::api::{AnalyzeMode, AnalyzeRequest, AssessmentRecord, CalibrateRequest, CurationQuery};
use dqaf_core::context::load_task_context;
use dqaf_core::episode::{load_episode, write_episode, EpisodeError};
use dqaf_core::evidence::Label;
use dqaf_core::semantic::SemanticScript;
use dqaf_core::synth::{generate_episode, parse_fault_list, GenerationConfig, SynthError};
use dqaf_core::validation::{calibrate_from_clean, run_validation, ValidationError, ValidationOptions};
use dqaf_server::{ServeError, ServiceConfig};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "dqaf", version, about = "Quality assessment for teleoperated robot demonstrations")]
struct Cli {
    /// Base URL of a running service.
    #[arg(long, global = true, env = "DQAF_SERVER", default_value = "http://127.0.0.1:8080")]
    server: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Upload episodes (.dqaf.jsonl), task contexts (.task.json) or semantic mocks (.semmock.json).
    Ingest {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Calibrate a task's threshold profile from stored reference episodes.
    Calibrate {
        #[arg(long)]
        task: String,
        /// Reference episode ids, comma separated or repeated.
        #[arg(long, value_delimiter = ',', required = true)]
        refs: Vec<String>,
        #[arg(long, default_value_t = 95.0)]
        percentile: f64,
    },
    /// Analyze a stored episode and print the outcome.
    Analyze {
        id: String,
        #[arg(long)]
        streaming: bool,
        /// Return as soon as the analysis is queued.
        #[arg(long)]
        no_wait: bool,
        /// Print the full record as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Print the ranked curation manifest.
    Curate {
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value_t = 0.0)]
        min_quality: f64,
        #[arg(long, value_parser = parse_label)]
        label: Option<Label>,
        /// Also write the manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a synthetic validation cohort locally.
    Validate {
        #[arg(long, default_value_t = 72)]
        successes: usize,
        #[arg(long, default_value_t = 28)]
        failures: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report path; defaults to `validation-<seed>.validation.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write synthetic episodes with their task context and semantic mocks.
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Faults as `kind@start-end[:magnitude]`, comma separated.
        #[arg(long, default_value = "")]
        faults: String,
        #[arg(long, default_value = "synth")]
        id: String,
        /// Number of episodes; ids get a numeric suffix when > 1.
        #[arg(long, default_value_t = 1)]
        count: u64,
        #[arg(long, default_value = "handover")]
        task: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long, env = "DQAF_STORE", default_value = "dqaf-store")]
        store: PathBuf,
        /// Use stored semantic mocks and rule-based feedback instead of live models.
        #[arg(long)]
        mock_providers: bool,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Serve(#[from] ServeError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{0}: unknown file type (expected .dqaf.jsonl, .task.json or .semmock.json)")]
    UnknownFile(PathBuf),
    #[error("analysis of {id} ended in error: {message}")]
    AnalysisFailed { id: String, message: String },
}

fn parse_label(s: &str) -> Result<Label, String> {
    match s.to_ascii_lowercase().as_str() {
        "success" => Ok(Label::Success),
        "failure" => Ok(Label::Failure),
        _ => Err(format!("expected success or failure, got {s:?}")),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("values serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("values serialize"));
}

async fn ingest(client: &Client, files: &[PathBuf]) -> Result<(), CliError> {
    for path in files {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let stored = if name.ends_with(".dqaf.jsonl") {
            client.put_episode(&load_episode(path)?).await?
        } else if name.ends_with(".task.json") {
            client.put_context(&load_task_context(path)?).await?
        } else if name.ends_with(".semmock.json") {
            let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.clone(), source })?;
            let script: SemanticScript =
                serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.clone(), source })?;
            client.put_semantic_mock(&script).await?
        } else {
            return Err(CliError::UnknownFile(path.clone()));
        };
        println!("{}\t{}\t{}", stored.id, stored.sha256, path.display());
    }
    Ok(())
}

fn print_record(rec: &AssessmentRecord) {
    println!("episode   {}", rec.episode_id);
    println!("status    {:?}", rec.status);
    if let Some(e) = &rec.error {
        println!("error     {e}");
    }
    if let Some(s) = &rec.streaming {
        println!(
            "streaming {}/{} updates done before end, residual {:.1} s",
            s.completed_before_end, s.total_updates, s.simulated_residual_s
        );
    }
    let Some(a) = &rec.assessment else { return };
    println!("quality   {:.2}", a.q);
    println!("label     {:?}", a.classification.label);
    if !a.classification.reasons.is_empty() {
        println!("reasons   {}", a.classification.reasons.join(", "));
    }
    println!("progress  {:.1}%", a.trace.final_progress());
    for item in &a.feedback {
        println!(
            "- [{:?}] {} @ {:.1}-{:.1} s: {}",
            item.severity, item.what, item.location.window.0, item.location.window.1, item.change
        );
    }
}

async fn run(cli: Cli) -> Result<(), CliError> {
    let client = Client::new(&cli.server);
    match cli.command {
        Command::Ingest { files } => ingest(&client, &files).await?,
        Command::Calibrate { task, refs, percentile } => {
            let profile = client
                .calibrate(&CalibrateRequest {
                    task_id: task,
                    reference_ids: refs,
                    percentile: Some(percentile),
                    percentile_overrides: Default::default(),
                    policy: None,
                })
                .await?;
            print_json(&profile);
        }
        Command::Analyze { id, streaming, no_wait, json } => {
            let mode = if streaming { AnalyzeMode::Streaming } else { AnalyzeMode::Batch };
            let rec = client.analyze_with(&id, &AnalyzeRequest { mode, wait: !no_wait }).await?;
            if json {
                print_json(&rec);
            } else {
                print_record(&rec);
            }
            if let (Some(message), false) = (rec.error.clone(), json) {
                return Err(CliError::AnalysisFailed { id, message });
            }
        }
        Command::Curate { task, min_quality, label, out } => {
            let manifest = client.curation(&CurationQuery { task_id: task, min_quality: Some(min_quality), label }).await?;
            for e in &manifest.episodes {
                println!("{:.3}\t{:?}\t{}\t{}", e.q, e.label, e.episode_id, e.reasons.join(","));
            }
            if let Some(path) = out {
                write_json(&path, &manifest)?;
            }
        }
        Command::Validate { successes, failures, seed, out } => {
            let opts = ValidationOptions::default();
            let profile = calibrate_from_clean(opts.reference_count, seed, &opts.generation, &opts.policy)?;
            let report = run_validation(successes, failures, seed, &profile, &opts)?;
            let path = out.unwrap_or_else(|| PathBuf::from(format!("validation-{seed}.validation.json")));
            write_json(&path, &report)?;
            print!("{}", report.to_table());
            println!("report written to {}", path.display());
        }
        Command::Generate { seed, faults, id, count, task, out } => {
            let faults = parse_fault_list(&faults)?;
            let cfg = GenerationConfig { task_id: task.clone(), ..Default::default() };
            std::fs::create_dir_all(&out).map_err(|source| CliError::Io { path: out.clone(), source })?;
            for k in 0..count {
                let episode_id = if count == 1 { id.clone() } else { format!("{id}-{k:03}") };
                let g = generate_episode(&episode_id, seed.wrapping_add(k), &cfg, &faults)?;
                write_episode(&g.episode, out.join(format!("{episode_id}.dqaf.jsonl")))?;
                write_json(&out.join(format!("{episode_id}.semmock.json")), &g.script)?;
                write_json(&out.join(format!("{episode_id}.truth.json")), &g.truth)?;
                if k == 0 {
                    write_json(&out.join(format!("{task}.task.json")), &g.context)?;
                }
                println!("{episode_id}\t{:?}", g.truth.label);
            }
        }
        Command::Serve { port, host, store, mock_providers } => {
            tracing_subscriber::fmt().with_target(false).init();
            let mut cfg = ServiceConfig::from_env();
            cfg.store_root = store;
            cfg.mock_providers = mock_providers;
            dqaf_server::serve(SocketAddr::new(host, port), cfg).await?;
        }
    }
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    match run(Cli::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dqaf: {e}");
            ExitCode::FAILURE
        }
    }
}
