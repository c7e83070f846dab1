use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::info;

use coplan_core::lang::{bundled_source, parse, DomainSource};
use coplan_core::metrics::{build_timeline, export_fluency, export_timing, fluency, perception_timing, ExportFormat};
use coplan_core::planner::plan;
use coplan_core::sim::{run, EventLog, PolicyKind, Scenario};
use coplan_core::state::new_state;
use coplan_gateway::{Gateway, GatewayConfig, DEFAULT_PORT};

#[derive(Parser)]
#[command(name = "coplan", version, about = "Plan, simulate and analyze human-robot assembly sessions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decompose a domain's goal into a primitive plan.
    Plan {
        /// Bundled domain name (oddvar, hutten, kritter, ragrund, hand_over_micro) or a .htn path.
        #[arg(long)]
        domain: String,
        /// Write steps and decomposition tree as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a seeded session to completion and write its event log.
    Simulate {
        #[arg(long)]
        domain: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// compliant, independent[:p], variable[:scale] or error[:p].
        #[arg(long, default_value = "compliant", value_parser = parse_policy)]
        policy: PolicyKind,
        /// Event log destination (NDJSON); stdout when absent.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Compute fluency and perception timing from event logs.
    Metrics {
        /// One or more NDJSON event logs.
        #[arg(long, required = true, num_args = 1..)]
        log: Vec<PathBuf>,
        /// Write fluency and timing reports as JSON to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write fluency.csv and perception_timing.csv into this directory.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Serve an interactive session over WebSocket on /session.
    Serve {
        #[arg(long)]
        domain: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        /// Virtual seconds per wall-clock second.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        /// Write the session's event log here when it ends.
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

fn parse_policy(s: &str) -> Result<PolicyKind, String> {
    match s.parse()? {
        PolicyKind::Interactive => Err("interactive sessions run under `serve`".into()),
        p => Ok(p),
    }
}

/// A failure that maps to exit code 1.
struct Failure(String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("COPLAN_LOG_LEVEL", "error")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Plan { domain, out } => cmd_plan(&domain, out.as_deref()),
        Command::Simulate {
            domain,
            seed,
            policy,
            log,
        } => cmd_simulate(&domain, seed, policy, log.as_deref()),
        Command::Metrics { log, out, csv } => cmd_metrics(&log, out.as_deref(), csv.as_deref()),
        Command::Serve {
            domain,
            seed,
            port,
            speed,
            log,
        } => cmd_serve(&domain, seed, port, speed, log.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

/// Resolves a bundled name first, then a file path.
fn load_source(domain: &str) -> Result<(String, String), Failure> {
    if let Some(src) = bundled_source(domain) {
        return Ok((domain.to_string(), src.to_string()));
    }
    let text = fs::read_to_string(domain).map_err(|e| Failure(format!("cannot read domain `{domain}`: {e}")))?;
    Ok((domain.to_string(), text))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| Failure(format!("cannot write {}: {e}", path.display())))
}

fn cmd_plan(domain: &str, out: Option<&Path>) -> Result<(), Failure> {
    let (origin, text) = load_source(domain)?;
    let d = parse(&DomainSource::new(origin.clone(), text)).map_err(|e| Failure(e.render(&origin)))?;
    let state = new_state(&d.entities)?;
    let started = Instant::now();
    let p = plan(&d, &state)?;
    let elapsed = started.elapsed().as_secs_f64();
    println!("{} steps", p.len());
    // Wall time goes to stderr so stdout stays identical across runs.
    eprintln!("planning time: {elapsed:.4} s");
    if let Some(path) = out {
        let doc = serde_json::json!({
            "domain": d.name,
            "steps": p.records(),
            "tree": p.tree,
        });
        write(path, &serde_json::to_vec_pretty(&doc)?)?;
    }
    Ok(())
}

fn cmd_simulate(domain: &str, seed: u64, policy: PolicyKind, log: Option<&Path>) -> Result<(), Failure> {
    let (name, text) = load_source(domain)?;
    let scenario = Scenario::new(&name, &text, seed, policy);
    let result = run(&scenario)?;
    info!(
        "{} events, goal reached: {}, span {:.1} s",
        result.events.len(),
        result.goal_reached(),
        result.span()
    );
    let ndjson = result.to_ndjson();
    match log {
        Some(path) => write(path, ndjson.as_bytes())?,
        None => print!("{ndjson}"),
    }
    Ok(())
}

fn cmd_metrics(logs: &[PathBuf], out: Option<&Path>, csv: Option<&Path>) -> Result<(), Failure> {
    let mut parsed = Vec::with_capacity(logs.len());
    for path in logs {
        let text = fs::read_to_string(path).map_err(|e| Failure(format!("cannot read {}: {e}", path.display())))?;
        let log = EventLog::from_ndjson(&text).map_err(|e| Failure(format!("{}: {e}", path.display())))?;
        parsed.push(log);
    }
    let mut reports = Vec::with_capacity(parsed.len());
    for (path, log) in logs.iter().zip(&parsed) {
        let r = build_timeline(log)
            .and_then(|tl| fluency(&tl))
            .map_err(|e| Failure(format!("{}: {e}", path.display())))?;
        println!(
            "{}: h_idle {:.2} r_idle {:.2} f_del {:.2} c_act {:.2}",
            path.display(),
            r.h_idle,
            r.r_idle,
            r.f_del,
            r.c_act
        );
        reports.push(r);
    }
    let timing = perception_timing(&parsed)?;
    for (kind, k) in &timing.kinds {
        match k.stats {
            Some(s) => println!(
                "{kind}: n {} mean {:.2} s min {:.2} s max {:.2} s",
                k.count, s.mean_s, s.min_s, s.max_s
            ),
            None => println!("{kind}: n 0"),
        }
    }
    if let Some(path) = out {
        let doc = serde_json::json!({ "fluency": reports, "perception_timing": timing });
        write(path, &serde_json::to_vec_pretty(&doc)?)?;
    }
    if let Some(dir) = csv {
        fs::create_dir_all(dir).map_err(|e| Failure(format!("cannot create {}: {e}", dir.display())))?;
        write(&dir.join("fluency.csv"), &export_fluency(&reports, ExportFormat::Csv))?;
        write(&dir.join("perception_timing.csv"), &export_timing(&timing, ExportFormat::Csv))?;
    }
    Ok(())
}

fn cmd_serve(domain: &str, seed: u64, port: u16, speed: f64, log: Option<&Path>) -> Result<(), Failure> {
    let (name, text) = load_source(domain)?;
    let scenario = Scenario::new(&name, &text, seed, PolicyKind::Interactive);
    let config = GatewayConfig {
        speed,
        ..GatewayConfig::default()
    };
    let runtime = tokio::runtime::Runtime::new()?;
    let result = runtime.block_on(async {
        let gateway = Gateway::bind(scenario, SocketAddr::from(([0, 0, 0, 0], port)), config).await?;
        println!("listening on ws://{}/session", gateway.local_addr());
        gateway.finished().await
    })?;
    println!(
        "session ended at t={:.1} s, goal reached: {}",
        result.span(),
        result.goal_reached()
    );
    if let Some(path) = log {
        write(path, result.to_ndjson().as_bytes())?;
    }
    Ok(())
}
