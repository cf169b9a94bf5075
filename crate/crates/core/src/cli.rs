//! Command-line entry point: `serve`, `replay`, `probe`, `report`.
//!
//! Configuration is layered: command-line flags override environment
//! variables, which override a flat TOML file (`--config`), which
//! overrides built-in defaults. Exit codes: 0 success, 1 usage error,
//! 2 runtime failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;

use crate::analytics::{self, cost_curve, ReplayOptions};
use crate::policy::PressureZone;
use crate::proxy::log::{read_log, Action, DecisionLogRecord};
use crate::proxy::{Mode, ProxyConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const ENV_UPSTREAM: &str = "PICHAY_UPSTREAM";
pub const ENV_MODE: &str = "PICHAY_MODE";
pub const ENV_LOG: &str = "PICHAY_LOG";
pub const ENV_CHECKPOINT_DIR: &str = "PICHAY_CHECKPOINT_DIR";
pub const ENV_LISTEN: &str = "PICHAY_LISTEN";

const CONFIG_KEYS_HELP: &str = "\
Configuration file keys (flat TOML, same names as the flags with '_'):
  listen_address, upstream_base_url, mode, checkpoint_dir, log_path,
  capture_path, phantom_enabled, skill_prefixes,
  tau_user_turns, min_size_bytes, advisory_tokens, involuntary_tokens,
  aggressive_tokens, aggressive_tau, aggressive_min_size, bytes_per_token,
  pin_decay_enabled, pin_half_life_turns, pin_evict_strength,
  context_window_tokens, pageable_tools, protected_tools

Environment: PICHAY_UPSTREAM, PICHAY_MODE, PICHAY_LOG, PICHAY_CHECKPOINT_DIR, PICHAY_LISTEN";

#[derive(Debug, Parser)]
#[command(name = "pichay", version, about = "Demand paging proxy and offline tools for LLM context windows", after_help = CONFIG_KEYS_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the proxy until interrupted.
    Serve {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Replay recorded sessions through the pager and report fault rates.
    Replay {
        /// Trace files or directories (searched for *.jsonl).
        #[arg(long = "traces", num_args = 1.., required = true)]
        traces: Vec<PathBuf>,
        /// Zone to simulate, or "auto" to estimate from request size.
        #[arg(long, default_value = "involuntary")]
        zone: String,
        #[arg(long, short)]
        output: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Measure amplification and byte shares of session transcripts.
    Probe {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long, short)]
        output: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Summarize decision logs: fault tables and cost curves.
    Report {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        /// Write the cumulative cost curve here as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, short)]
        output: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// Overrides for every configuration field.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Flat TOML configuration file.
    #[arg(long = "config")]
    pub config_path: Option<PathBuf>,
    /// listen_address: host:port to accept clients on.
    #[arg(long = "listen")]
    pub listen_address: Option<String>,
    /// upstream_base_url: API base URL requests are forwarded to.
    #[arg(long = "upstream")]
    pub upstream_base_url: Option<String>,
    /// mode: observe, trim or compact.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// checkpoint_dir: directory for per-session metadata checkpoints.
    #[arg(long = "checkpoint-dir")]
    pub checkpoint_dir: Option<PathBuf>,
    /// log_path: decision log (JSONL).
    #[arg(long = "log")]
    pub log_path: Option<PathBuf>,
    /// capture_path: append each client request here for later replay.
    #[arg(long = "capture")]
    pub capture_path: Option<PathBuf>,
    /// phantom_enabled: offer memory_release and memory_fault.
    #[arg(long = "phantom")]
    pub phantom_enabled: Option<bool>,
    /// skill_prefixes: markers that start a skill listing entry (comma separated).
    #[arg(long = "skill-prefixes", value_delimiter = ',')]
    pub skill_prefixes: Option<Vec<String>>,
    /// tau_user_turns: age, in user turns, a result must exceed to be evicted.
    #[arg(long = "tau")]
    pub tau_user_turns: Option<u32>,
    /// min_size_bytes: results at or below this size are kept.
    #[arg(long = "min-size")]
    pub min_size_bytes: Option<u64>,
    /// advisory_tokens: estimated tokens where the advisory zone starts.
    #[arg(long)]
    pub advisory_tokens: Option<u64>,
    /// involuntary_tokens: where eviction starts.
    #[arg(long)]
    pub involuntary_tokens: Option<u64>,
    /// aggressive_tokens: where the tighter thresholds apply.
    #[arg(long)]
    pub aggressive_tokens: Option<u64>,
    /// aggressive_tau: age threshold in the aggressive zone.
    #[arg(long)]
    pub aggressive_tau: Option<u32>,
    /// aggressive_min_size: size threshold in the aggressive zone.
    #[arg(long)]
    pub aggressive_min_size: Option<u64>,
    /// bytes_per_token: divisor for token estimates.
    #[arg(long)]
    pub bytes_per_token: Option<f64>,
    /// pin_decay_enabled: let pins weaken with time since last access.
    #[arg(long)]
    pub pin_decay_enabled: Option<bool>,
    /// pin_half_life_turns: turns for pin strength to halve.
    #[arg(long)]
    pub pin_half_life_turns: Option<u32>,
    /// pin_evict_strength: decayed pins below this become evictable.
    #[arg(long)]
    pub pin_evict_strength: Option<f64>,
    /// context_window_tokens: window size used for fill percentages.
    #[arg(long)]
    pub context_window_tokens: Option<u64>,
    /// pageable_tools: tools whose results can fault back in (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub pageable_tools: Option<Vec<String>>,
    /// protected_tools: tools whose results are never evicted (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub protected_tools: Option<Vec<String>>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Defaults, then file, then environment, then flags.
pub fn resolve_config(args: &ConfigArgs, env: impl Fn(&str) -> Option<String>) -> Result<ProxyConfig, CliError> {
    let mut cfg = match &args.config_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| runtime(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str::<ProxyConfig>(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", p.display())))?
        }
        None => ProxyConfig::default(),
    };
    if let Some(v) = env(ENV_UPSTREAM) {
        cfg.upstream_base_url = v;
    }
    if let Some(v) = env(ENV_MODE) {
        cfg.mode = v.parse().map_err(|e| CliError::Usage(format!("{ENV_MODE}: {e}")))?;
    }
    if let Some(v) = env(ENV_LOG) {
        cfg.log_path = Some(v.into());
    }
    if let Some(v) = env(ENV_CHECKPOINT_DIR) {
        cfg.checkpoint_dir = Some(v.into());
    }
    if let Some(v) = env(ENV_LISTEN) {
        cfg.listen_address = v;
    }
    let a = args.clone();
    macro_rules! set {
        ($($src:ident => $($dst:ident).+),* $(,)?) => {
            $( if let Some(v) = a.$src { cfg.$($dst).+ = v; } )*
        };
    }
    set!(
        listen_address => listen_address,
        upstream_base_url => upstream_base_url,
        mode => mode,
        phantom_enabled => phantom_enabled,
        skill_prefixes => skill_prefixes,
        tau_user_turns => policy.tau_user_turns,
        min_size_bytes => policy.min_size_bytes,
        advisory_tokens => policy.advisory_tokens,
        involuntary_tokens => policy.involuntary_tokens,
        aggressive_tokens => policy.aggressive_tokens,
        aggressive_tau => policy.aggressive_tau,
        aggressive_min_size => policy.aggressive_min_size,
        bytes_per_token => policy.bytes_per_token,
        pin_decay_enabled => policy.pin_decay_enabled,
        pin_half_life_turns => policy.pin_half_life_turns,
        pin_evict_strength => policy.pin_evict_strength,
        context_window_tokens => policy.context_window_tokens,
        pageable_tools => policy.pageable_tools,
        protected_tools => policy.protected_tools,
    );
    if let Some(v) = a.checkpoint_dir {
        cfg.checkpoint_dir = Some(v);
    }
    if let Some(v) = a.log_path {
        cfg.log_path = Some(v);
    }
    if let Some(v) = a.capture_path {
        cfg.capture_path = Some(v);
    }
    cfg.policy.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn emit(value: &impl Serialize, output: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    match output {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| runtime(format!("cannot write {}: {e}", p.display()))),
        None => writeln!(out, "{text}").map_err(runtime),
    }
}

/// Parse arguments, run, and return the exit code.
pub fn run<I, T>(args: I, env: impl Fn(&str) -> Option<String>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{rendered}");
            } else {
                let _ = write!(out, "{rendered}");
            }
            return code;
        }
    };
    match dispatch(cli, env, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if let CliError::Usage(_) = e {
                let _ = writeln!(err, "\n{}", Cli::command().render_usage());
            }
            e.exit_code()
        }
    }
}

pub fn dispatch(cli: Cli, env: impl Fn(&str) -> Option<String>, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Serve { config } => {
            let cfg = resolve_config(&config, env)?;
            serve(cfg)
        }
        Command::Replay {
            traces,
            zone,
            output,
            config,
        } => {
            let cfg = resolve_config(&config, env)?;
            let zone = match zone.as_str() {
                "auto" => None,
                z => Some(z.parse::<PressureZone>().map_err(CliError::Usage)?),
            };
            let opts = ReplayOptions {
                policy: cfg.policy,
                zone,
            };
            let report = analytics::replay_paths(&traces, &opts);
            emit(&report, output.as_deref(), out)
        }
        Command::Probe { files, output, config } => {
            let _cfg = resolve_config(&config, env)?;
            let mut reports = Vec::new();
            for f in &files {
                let ts = analytics::load_file(f).map_err(runtime)?;
                reports.extend(ts.iter().map(analytics::probe));
            }
            emit(&reports, output.as_deref(), out)
        }
        Command::Report {
            logs,
            csv,
            output,
            config,
        } => {
            let cfg = resolve_config(&config, env)?;
            let mut records = Vec::new();
            for p in &logs {
                records.extend(read_log(p).map_err(|e| runtime(format!("cannot read {}: {e}", p.display())))?);
            }
            let report = build_log_report(&records, &cfg);
            if let Some(p) = csv {
                let c = cost_curve(&report.baseline_tokens, &report.managed_tokens).map_err(runtime)?;
                std::fs::write(&p, c.to_csv()).map_err(|e| runtime(format!("cannot write {}: {e}", p.display())))?;
            }
            emit(&report, output.as_deref(), out)
        }
    }
}

fn serve(cfg: ProxyConfig) -> Result<(), CliError> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(runtime)?;
    rt.block_on(async {
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("interrupted; shutting down");
        };
        crate::proxy::server::serve(cfg, shutdown).await.map_err(runtime)
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FaultRow {
    pub session_id: String,
    pub requests: u64,
    pub evictions: u64,
    pub paged_evictions: u64,
    pub faults: u64,
    pub pins: u64,
    pub fault_rate_paged: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogReport {
    pub summary: analytics::ReplayReport,
    pub sessions: Vec<FaultRow>,
    pub actions: BTreeMap<String, u64>,
    pub baseline_tokens: Vec<u64>,
    pub managed_tokens: Vec<u64>,
    pub cumulative_reduction: Option<f64>,
    pub fail_open: u64,
}

fn detail_num(detail: &str, key: &str) -> Option<u64> {
    detail
        .split([' ', ';'])
        .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .and_then(|v| v.parse().ok())
}

pub fn build_log_report(records: &[DecisionLogRecord], cfg: &ProxyConfig) -> LogReport {
    let mut rows: BTreeMap<&str, FaultRow> = BTreeMap::new();
    let mut actions: BTreeMap<String, u64> = BTreeMap::new();
    let (mut baseline, mut managed) = (Vec::new(), Vec::new());
    let mut fail_open = 0;
    for r in records {
        *actions.entry(format!("{:?}", r.action).to_lowercase()).or_default() += 1;
        let row = rows.entry(r.session_id.as_str()).or_insert_with(|| FaultRow {
            session_id: r.session_id.clone(),
            ..Default::default()
        });
        match r.action {
            Action::Forward => {
                row.requests += 1;
                if r.detail.starts_with("fail-open") {
                    fail_open += 1;
                }
                if let (Some(rx), Some(fw)) = (detail_num(&r.detail, "received"), detail_num(&r.detail, "forwarded")) {
                    baseline.push(crate::policy::estimate_tokens(rx, &cfg.policy));
                    managed.push(crate::policy::estimate_tokens(fw, &cfg.policy));
                }
            }
            Action::Evict => {
                row.evictions += 1;
                if r.detail.starts_with("category=paged") {
                    row.paged_evictions += 1;
                }
            }
            Action::Fault => row.faults += 1,
            Action::Pin => row.pins += 1,
            _ => {}
        }
    }
    let sessions: Vec<FaultRow> = rows
        .into_values()
        .map(|mut r| {
            r.fault_rate_paged = (r.paged_evictions > 0).then(|| r.faults as f64 / r.paged_evictions as f64);
            r
        })
        .collect();
    let cumulative_reduction = cost_curve(&baseline, &managed).ok().filter(|c| !c.points.is_empty()).map(|c| c.reduction);
    LogReport {
        summary: analytics::report_from_log(records),
        sessions,
        actions,
        baseline_tokens: baseline,
        managed_tokens: managed,
        cumulative_reduction,
        fail_open,
    }
}

/// `help` output for the top level and every subcommand, concatenated.
pub fn full_help() -> String {
    let mut cmd = Cli::command();
    let mut s = cmd.render_long_help().to_string();
    for sub in cmd.get_subcommands_mut() {
        s.push_str(&sub.render_long_help().to_string());
    }
    s
}
