//! Command-line interface.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anchorage_core::anchors::AnchorKind;
use anchorage_core::engine::EngineMode;
use anchorage_core::lab::{self, FailureSummary, WorkloadSpec};
use anchorage_core::router::DEFAULT_THRESHOLD;
use clap::{Parser, Subcommand};
use serde_json::json;

use crate::config::{ConfigError, EngineConfig};
use crate::runtime::{ChatReply, Runtime, ServiceError};

#[derive(Debug, Parser)]
#[command(name = "anchorage", version, about = "Anchor-file memory engine for conversational agents")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = "ANCHORAGE_CONFIG")]
    pub config: Option<PathBuf>,
    /// Directory holding one sub-directory per agent (overrides the config).
    #[arg(long, global = true)]
    pub root: Option<PathBuf>,
    /// Engine mode: inject, rag or hybrid (overrides the config).
    #[arg(long, global = true)]
    pub mode: Option<EngineMode>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a new agent.
    Init {
        agent: String,
        /// Copy anchor files (SOUL.md, ...) from this directory.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Text for SOUL.md.
        #[arg(long, allow_hyphen_values = true)]
        soul: Option<String>,
    },
    /// List agents.
    Agents,
    /// Interactive chat; one message per line, `/quit` to leave.
    Chat {
        agent: String,
        #[arg(long, default_value = "cli")]
        session: String,
    },
    /// Send a single message.
    Ask {
        agent: String,
        message: String,
        #[arg(long, default_value = "cli")]
        session: String,
        /// Print the full reply as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Record the identity baseline.
    Baseline { agent: String },
    /// Compare current behavior against the baseline.
    Drift {
        agent: String,
        #[arg(long)]
        json: bool,
    },
    /// Disable an anchor.
    Fail { agent: String, kind: AnchorKind },
    /// Re-enable an anchor.
    Heal { agent: String, kind: AnchorKind },
    /// Run the failure-bound and router simulations.
    Simulate {
        #[arg(long, default_value_t = 10_000)]
        scenarios: usize,
        #[arg(long, default_value_t = 10_000)]
        queries: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write one JSON record per line here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also measure continuity of this agent under each anchor failure.
        #[arg(long)]
        agent: Option<String>,
    },
    /// Time the cross-anchor consistency check as the anchor count grows.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = vec![2, 4, 8, 16, 32])]
        ks: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 16)]
        items: usize,
        #[arg(long)]
        json: bool,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

pub fn load_config(cli: &Cli) -> Result<EngineConfig, ServiceError> {
    let mut config = match &cli.config {
        Some(path) => EngineConfig::load(path)?,
        None => EngineConfig::default(),
    };
    if let Some(root) = &cli.root {
        config.root_directory = root.clone();
    }
    if let Some(mode) = cli.mode {
        config.mode = mode;
    }
    config.validate()?;
    Ok(config)
}

fn io_err(e: std::io::Error) -> ServiceError {
    ServiceError::Internal(e.to_string())
}

fn json_line(out: &mut dyn Write, value: &impl serde::Serialize) -> Result<(), ServiceError> {
    let text = serde_json::to_string(value).map_err(|e| ServiceError::Internal(e.to_string()))?;
    writeln!(out, "{text}").map_err(io_err)
}

fn pretty(out: &mut dyn Write, value: &impl serde::Serialize) -> Result<(), ServiceError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| ServiceError::Internal(e.to_string()))?;
    writeln!(out, "{text}").map_err(io_err)
}

fn describe(reply: &ChatReply) -> String {
    let route = match (reply.route, reply.p_exhaustive) {
        (Some(r), Some(p)) => format!("{r} p={p:.2}{}", if reply.fallback { " fallback" } else { "" }),
        (Some(r), None) => r.to_string(),
        (None, _) => "INJECT".to_string(),
    };
    format!(
        "[{route} | {} entries | ~{} tokens{}{}]",
        reply.provenance.len(),
        reply.token_estimate,
        if reply.truncated { " | truncated" } else { "" },
        if reply.degraded { " | degraded" } else { "" },
    )
}

/// Run the interactive loop over `input`, writing replies to `out`.
pub fn chat_loop(
    runtime: &Runtime,
    agent: &str,
    session: &str,
    mode: Option<EngineMode>,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
) -> Result<Vec<ChatReply>, ServiceError> {
    let mut replies = Vec::new();
    let mut line = String::new();
    loop {
        write!(out, "> ").map_err(io_err)?;
        out.flush().map_err(io_err)?;
        line.clear();
        if input.read_line(&mut line).map_err(io_err)? == 0 {
            break;
        }
        let message = line.trim();
        if message.is_empty() {
            continue;
        }
        if message == "/quit" || message == "/exit" {
            break;
        }
        let mut guard = runtime.lock_blocking(agent)?;
        match runtime.chat(&mut guard, session, message, mode) {
            Ok(reply) => {
                writeln!(out, "{}\n{}", reply.response, describe(&reply)).map_err(io_err)?;
                replies.push(reply);
            }
            Err(e @ ServiceError::Backend { .. }) => writeln!(out, "error: {e}").map_err(io_err)?,
            Err(e) => return Err(e),
        }
    }
    Ok(replies)
}

fn read_anchor_dir(dir: &Path) -> Result<BTreeMap<AnchorKind, String>, ServiceError> {
    let mut texts = BTreeMap::new();
    for kind in AnchorKind::ALL.into_iter().filter(|k| *k != AnchorKind::Memory) {
        let path = dir.join(kind.filename());
        match fs::read_to_string(&path) {
            Ok(text) => {
                texts.insert(kind, text);
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(ServiceError::BadRequest(format!("{}: {e}", path.display()))),
        }
    }
    Ok(texts)
}

fn simulate(
    runtime: Option<&Runtime>,
    scenarios: usize,
    queries: usize,
    seed: u64,
    records: &mut dyn Write,
    out: &mut dyn Write,
) -> Result<(), ServiceError> {
    let sim = lab::run_failure_simulation(scenarios, seed);
    for r in &sim {
        let mut v = serde_json::to_value(r).map_err(|e| ServiceError::Internal(e.to_string()))?;
        v["record"] = json!("failure_scenario");
        json_line(records, &v)?;
    }
    let summary = FailureSummary::from_records(&sim);

    let spec = WorkloadSpec {
        count: queries.max(1),
        seed,
        ..Default::default()
    };
    let workload = lab::generate_workload(&spec).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
    let oracle = lab::evaluate_router(&workload, DEFAULT_THRESHOLD, |q| {
        Ok::<_, std::convert::Infallible>(lab::oracle_probability(q))
    })
    .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
    let mut evals = vec![("oracle", oracle)];
    if let Some(rt) = runtime {
        let backend = rt.engine().backend();
        let eval = lab::evaluate_with_backend(&workload, rt.engine().router().threshold(), backend.as_ref())
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        evals.push(("backend", eval));
    }
    for (name, e) in &evals {
        let mut v = serde_json::to_value(e).map_err(|e| ServiceError::Internal(e.to_string()))?;
        v["record"] = json!("router_evaluation");
        v["classifier"] = json!(name);
        json_line(records, &v)?;
    }

    let w = |out: &mut dyn Write, s: String| writeln!(out, "{s}").map_err(io_err);
    w(out, "failure bound".into())?;
    w(out, format!("  scenarios        {:>10}", summary.scenarios))?;
    w(out, format!("  bound held       {:>10}", summary.held))?;
    w(out, format!("  min slack        {:>10.6}", summary.min_slack))?;
    w(out, format!("  mean residual    {:>10.6}", summary.mean_residual))?;
    w(out, format!("  mean bound       {:>10.6}", summary.mean_bound))?;
    w(out, "router".into())?;
    w(out, format!("  {:<10} {:>9} {:>9} {:>13} {:>9}", "classifier", "accuracy", "rag frac", "entropy bound", "meets"))?;
    for (name, e) in &evals {
        w(
            out,
            format!(
                "  {:<10} {:>9.4} {:>9.4} {:>13.4} {:>9}",
                name,
                e.accuracy,
                e.rag_fraction,
                e.entropy_bound,
                e.meets_entropy_bound()
            ),
        )?;
    }
    Ok(())
}

fn measured(runtime: &Runtime, agent: &str, records: &mut dyn Write, out: &mut dyn Write) -> Result<(), ServiceError> {
    let mut guard = runtime.lock_blocking(agent)?;
    let state = &mut *guard;
    let baseline = state
        .baseline
        .clone()
        .ok_or_else(|| ServiceError::NoBaseline(agent.to_string()))?;
    writeln!(out, "measured continuity for {agent}").map_err(io_err)?;
    for kind in AnchorKind::ALL {
        let continuity = lab::measured_failure(
            runtime.engine(),
            &mut state.set,
            &state.index,
            kind,
            &baseline,
            runtime.probes(),
            runtime.config().probe_mode,
        )
        .map_err(|e| match e {
            lab::LabError::Drift(d) => ServiceError::from(d),
            lab::LabError::Storage(s) => ServiceError::from(s),
            lab::LabError::Invalid(m) => ServiceError::BadRequest(m),
        })?;
        let weight = state.set.anchor(kind).weight;
        json_line(
            records,
            &json!({"record": "measured_failure", "agent_id": agent, "kind": kind, "weight": weight, "continuity": continuity}),
        )?;
        writeln!(out, "  {:<18} weight {:.2}  continuity {:.4}", kind.filename(), weight, continuity).map_err(io_err)?;
    }
    Ok(())
}

fn toggle(runtime: &Runtime, agent: &str, kind: AnchorKind, enabled: bool, out: &mut dyn Write) -> Result<(), ServiceError> {
    let mut guard = runtime.lock_blocking(agent)?;
    runtime.set_failure(&mut guard, kind, enabled)?;
    writeln!(out, "{} {}", kind.filename(), if enabled { "enabled" } else { "disabled" }).map_err(io_err)
}

/// Execute `cli`, reading interactive input from `input` and writing
/// results to `out`.
pub fn run(cli: Cli, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<(), ServiceError> {
    if let Command::Bench { ks, reps, items, json } = &cli.command {
        let backend = anchorage_core::backend::MockBackend::new(64);
        let report = lab::measure_consistency_cost(&backend, ks, *reps, *items)
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        if *json {
            return pretty(out, &report);
        }
        let w = |out: &mut dyn Write, s: String| writeln!(out, "{s}").map_err(io_err);
        w(out, format!("{:>4} {:>12} {:>14} {:>14}", "k", "item pairs", "min (us)", "median (us)"))?;
        for t in &report.timings {
            w(
                out,
                format!("{:>4} {:>12} {:>14.2} {:>14.2}", t.k, t.item_pairs, t.min_secs * 1e6, t.median_secs * 1e6),
            )?;
        }
        w(out, format!("linear fit r2    {:.4}", report.linear.r2))?;
        w(out, format!("quadratic fit r2 {:.4}", report.quadratic.r2))?;
        w(out, format!("best model       {} (r2 {:.4})", report.best_model, report.best_r2))?;
        w(out, format!("monotone in k    {}", report.is_monotone()))?;
        return Ok(());
    }

    let config = load_config(&cli)?;
    let runtime = Runtime::open(config)?;
    let mode = cli.mode;
    match cli.command {
        Command::Init { agent, from, soul } => {
            let mut texts = match &from {
                Some(dir) => read_anchor_dir(dir)?,
                None => BTreeMap::new(),
            };
            if let Some(soul) = soul {
                texts.insert(AnchorKind::Soul, soul);
            }
            let info = runtime.create_agent(&agent, &texts)?;
            writeln!(out, "created {} in {}", info.agent_id, runtime.root().join(&agent).display()).map_err(io_err)?;
        }
        Command::Agents => {
            for id in runtime.agent_ids() {
                let guard = runtime.lock_blocking(&id)?;
                let info = runtime.info(&guard);
                writeln!(out, "{}\t{} entries\tbaseline={}", info.agent_id, info.memory_entries, info.has_baseline)
                    .map_err(io_err)?;
            }
        }
        Command::Chat { agent, session } => {
            runtime.agent(&agent)?;
            chat_loop(&runtime, &agent, &session, mode, input, out)?;
        }
        Command::Ask {
            agent,
            message,
            session,
            json,
        } => {
            let mut guard = runtime.lock_blocking(&agent)?;
            let reply = runtime.chat(&mut guard, &session, &message, mode)?;
            if json {
                pretty(out, &reply)?;
            } else {
                writeln!(out, "{}\n{}", reply.response, describe(&reply)).map_err(io_err)?;
            }
        }
        Command::Baseline { agent } => {
            let mut guard = runtime.lock_blocking(&agent)?;
            let hash = runtime.take_baseline(&mut guard)?;
            writeln!(out, "baseline {} ({})", hash.bits, hash.probe_set_version).map_err(io_err)?;
        }
        Command::Drift { agent, json } => {
            let mut guard = runtime.lock_blocking(&agent)?;
            let report = runtime.drift(&mut guard)?;
            if json {
                pretty(out, &report)?;
            } else {
                writeln!(
                    out,
                    "hamming distance {} (threshold {}): {}\nKL estimate {:.6} nats",
                    report.hamming_distance,
                    report.threshold,
                    if report.drifted { "DRIFTED" } else { "stable" },
                    report.kl_estimate
                )
                .map_err(io_err)?;
            }
        }
        Command::Fail { agent, kind } => toggle(&runtime, &agent, kind, false, out)?,
        Command::Heal { agent, kind } => toggle(&runtime, &agent, kind, true, out)?,
        Command::Simulate {
            scenarios,
            queries,
            seed,
            out: records_path,
            agent,
        } => {
            let mut sink: Box<dyn Write> = match &records_path {
                Some(p) => Box::new(std::io::BufWriter::new(fs::File::create(p).map_err(io_err)?)),
                None => Box::new(std::io::sink()),
            };
            simulate(Some(&runtime), scenarios, queries, seed, &mut sink, out)?;
            if let Some(agent) = agent {
                measured(&runtime, &agent, &mut sink, out)?;
            }
            sink.flush().map_err(io_err)?;
        }
        Command::Serve { addr } => {
            let runtime = Arc::new(runtime);
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(|e| ServiceError::Config(ConfigError::Invalid(e.to_string())))?;
            rt.block_on(crate::api::serve(runtime, addr, |bound| {
                let _ = writeln!(out, "listening on {bound}");
                let _ = out.flush();
            }))
            .map_err(|e| ServiceError::Internal(format!("server: {e}")))?;
        }
        Command::Bench { .. } => unreachable!("handled above"),
    }
    Ok(())
}
