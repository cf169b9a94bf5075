//! The interposition service.
//!
//! [`pipeline::Engine`] does all request rewriting synchronously and is
//! shared with tests and the replay harness; [`server`] wraps it in an HTTP
//! service that forwards to the upstream and relays the response stream.

pub mod log;
pub mod pipeline;
pub mod server;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::policy::PolicyConfig;
use crate::trimming::default_skill_prefixes;
use crate::wire::{Request, Role};

pub use log::{Action, DecisionLog, DecisionLogRecord};
pub use pipeline::{Engine, FaultInjection, Prepared, Stage};

pub const SESSION_HEADER: &str = "x-session-id";
pub const DEFAULT_LISTEN: &str = "127.0.0.1:8377";
pub const DEFAULT_UPSTREAM: &str = "https://api.anthropic.com";

/// Each mode includes everything the previous one does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Log only; forwarded bytes equal received bytes.
    Observe,
    /// Tool stubbing and skill dedup.
    Trim,
    /// Trimming plus eviction, fault handling and the cooperative channels.
    #[default]
    Compact,
}

impl Mode {
    pub fn trims(self) -> bool {
        self >= Mode::Trim
    }

    pub fn compacts(self) -> bool {
        self == Mode::Compact
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Observe => "observe",
            Mode::Trim => "trim",
            Mode::Compact => "compact",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "observe" => Ok(Mode::Observe),
            "trim" => Ok(Mode::Trim),
            "compact" => Ok(Mode::Compact),
            other => Err(format!("unknown mode {other:?} (expected observe, trim or compact)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProxyConfig {
    pub listen_address: String,
    pub upstream_base_url: String,
    pub mode: Mode,
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    /// Append each client request as a JSON line, for later replay.
    pub capture_path: Option<PathBuf>,
    pub phantom_enabled: bool,
    pub skill_prefixes: Vec<String>,
    #[serde(flatten)]
    pub policy: PolicyConfig,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            listen_address: DEFAULT_LISTEN.into(),
            upstream_base_url: DEFAULT_UPSTREAM.into(),
            mode: Mode::Compact,
            checkpoint_dir: None,
            log_path: None,
            capture_path: None,
            phantom_enabled: true,
            skill_prefixes: default_skill_prefixes(),
            policy: PolicyConfig::default(),
        }
    }
}

/// Keep ids safe to use as file names.
pub fn sanitize_session_id(raw: &str) -> Option<String> {
    let s: String = raw
        .trim()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .take(128)
        .collect();
    let s = s.trim_start_matches('.').to_string();
    (!s.is_empty()).then_some(s)
}

/// Client header when present, otherwise a hash of the first user message
/// and the system prompt.
pub fn derive_session_id(req: &Request, header: Option<&str>) -> String {
    if let Some(id) = header.and_then(sanitize_session_id) {
        return id;
    }
    let first_user = req
        .messages
        .iter()
        .find(|m| m.role == Role::User)
        .map(|m| m.blocks.iter().map(|b| b.body()).collect::<Vec<_>>().join("\n"))
        .unwrap_or_default();
    let system = Sha256::digest(req.system_prompt.join("\n").as_bytes());
    let mut h = Sha256::new();
    h.update(first_user.as_bytes());
    h.update([0u8]);
    h.update(system);
    format!("s-{}", &hex::encode(h.finalize())[..16])
}
