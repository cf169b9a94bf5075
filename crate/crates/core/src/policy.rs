//! Eviction decisions.
//!
//! Everything here is a pure function of its inputs. The live proxy and the
//! offline replay harness call the same functions.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::pagestore::{BlockMeta, BlockStatus, EvictionCategory, FaultHistory};
use crate::wire::BlockKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub tau_user_turns: u32,
    pub min_size_bytes: u64,
    pub advisory_tokens: u64,
    pub involuntary_tokens: u64,
    pub aggressive_tokens: u64,
    pub aggressive_tau: u32,
    pub aggressive_min_size: u64,
    pub bytes_per_token: f64,
    pub pin_decay_enabled: bool,
    pub pin_half_life_turns: u32,
    pub pin_evict_strength: f64,
    /// Denominator for the advisory's fill percentage.
    pub context_window_tokens: u64,
    /// Tools whose results have stable identity and can fault back in.
    pub pageable_tools: Vec<String>,
    /// Tools whose results are never evicted.
    pub protected_tools: Vec<String>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            tau_user_turns: 4,
            min_size_bytes: 500,
            advisory_tokens: 60_000,
            involuntary_tokens: 100_000,
            aggressive_tokens: 120_000,
            aggressive_tau: 1,
            aggressive_min_size: 100,
            bytes_per_token: 4.15,
            pin_decay_enabled: false,
            pin_half_life_turns: 8,
            pin_evict_strength: 0.25,
            context_window_tokens: 200_000,
            pageable_tools: ["Read", "NotebookRead", "Write", "ExitPlanMode"]
                .into_iter()
                .map(String::from)
                .collect(),
            protected_tools: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("zone thresholds must satisfy 0 < advisory < involuntary < aggressive (got {0} / {1} / {2})")]
    Zones(u64, u64, u64),
    #[error("aggressive_tau ({1}) must not exceed tau_user_turns ({0})")]
    Tau(u32, u32),
    #[error("bytes_per_token must be positive (got {0})")]
    BytesPerToken(f64),
    #[error("pin_half_life_turns must be at least 1")]
    HalfLife,
    #[error("pin_evict_strength must lie in (0, 1] (got {0})")]
    Strength(f64),
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0 < self.advisory_tokens
            && self.advisory_tokens < self.involuntary_tokens
            && self.involuntary_tokens < self.aggressive_tokens)
        {
            return Err(ConfigError::Zones(
                self.advisory_tokens,
                self.involuntary_tokens,
                self.aggressive_tokens,
            ));
        }
        if self.aggressive_tau > self.tau_user_turns {
            return Err(ConfigError::Tau(self.tau_user_turns, self.aggressive_tau));
        }
        if !(self.bytes_per_token > 0.0 && self.bytes_per_token.is_finite()) {
            return Err(ConfigError::BytesPerToken(self.bytes_per_token));
        }
        if self.pin_half_life_turns == 0 {
            return Err(ConfigError::HalfLife);
        }
        if !(self.pin_evict_strength > 0.0 && self.pin_evict_strength <= 1.0) {
            return Err(ConfigError::Strength(self.pin_evict_strength));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ToolClass {
    GarbageCollectable,
    Pageable,
    Protected,
}

/// GC vs paging. Unknown tools are garbage-collectable: no fault key can be
/// built for arguments of unknown meaning.
pub fn classify(tool_name: &str, cfg: &PolicyConfig) -> ToolClass {
    if cfg.protected_tools.iter().any(|t| t == tool_name) {
        ToolClass::Protected
    } else if cfg.pageable_tools.iter().any(|t| t == tool_name) {
        ToolClass::Pageable
    } else {
        ToolClass::GarbageCollectable
    }
}

pub fn category_of(class: ToolClass) -> Option<EvictionCategory> {
    match class {
        ToolClass::GarbageCollectable => Some(EvictionCategory::Gc),
        ToolClass::Pageable => Some(EvictionCategory::Paged),
        ToolClass::Protected => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PressureZone {
    Normal,
    Advisory,
    Involuntary,
    Aggressive,
}

impl PressureZone {
    pub fn as_str(self) -> &'static str {
        match self {
            PressureZone::Normal => "normal",
            PressureZone::Advisory => "advisory",
            PressureZone::Involuntary => "involuntary",
            PressureZone::Aggressive => "aggressive",
        }
    }
}

impl std::str::FromStr for PressureZone {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "normal" => Ok(PressureZone::Normal),
            "advisory" => Ok(PressureZone::Advisory),
            "involuntary" => Ok(PressureZone::Involuntary),
            "aggressive" => Ok(PressureZone::Aggressive),
            other => Err(format!("unknown zone {other:?}")),
        }
    }
}

pub fn compute_zone(estimated_tokens: u64, cfg: &PolicyConfig) -> PressureZone {
    if estimated_tokens >= cfg.aggressive_tokens {
        PressureZone::Aggressive
    } else if estimated_tokens >= cfg.involuntary_tokens {
        PressureZone::Involuntary
    } else if estimated_tokens >= cfg.advisory_tokens {
        PressureZone::Advisory
    } else {
        PressureZone::Normal
    }
}

/// `round(bytes / bytes_per_token)`.
pub fn estimate_tokens(bytes: u64, cfg: &PolicyConfig) -> u64 {
    (bytes as f64 / cfg.bytes_per_token).round() as u64
}

/// Why a block was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictReason {
    Age,
    Released,
    PinDecayed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// Index into the block slice passed to [`select_evictions`].
    pub index: usize,
    pub category: EvictionCategory,
    pub reason: EvictReason,
}

/// Age and size gates in force for a zone, or `None` when the zone does no
/// age-based eviction.
pub fn effective_thresholds(zone: PressureZone, cfg: &PolicyConfig) -> Option<(u32, u64)> {
    match zone {
        PressureZone::Normal | PressureZone::Advisory => None,
        PressureZone::Involuntary => Some((cfg.tau_user_turns, cfg.min_size_bytes)),
        PressureZone::Aggressive => Some((cfg.aggressive_tau, cfg.aggressive_min_size)),
    }
}

/// FIFO-by-user-turn-age selection.
///
/// Never returns error results, anchored blocks, non-resident blocks, or
/// pinned blocks (unless pin decay is on and the pin has weakened below the
/// threshold). Model-released blocks skip the age gate in every zone.
pub fn select_evictions(
    blocks: &[BlockMeta],
    history: &FaultHistory,
    zone: PressureZone,
    current_turn: u32,
    cfg: &PolicyConfig,
) -> Vec<Candidate> {
    let gates = effective_thresholds(zone, cfg);
    let min_size = gates.map(|(_, s)| s).unwrap_or(cfg.min_size_bytes);
    let mut out = Vec::new();
    for (index, b) in blocks.iter().enumerate() {
        if b.kind != BlockKind::ToolResult || b.is_error || b.anchored {
            continue;
        }
        let Some(category) = category_of(classify(b.tool_name.as_deref().unwrap_or_default(), cfg)) else {
            continue;
        };
        let mut reason = if b.released { EvictReason::Released } else { EvictReason::Age };
        match b.status {
            BlockStatus::Resident => {}
            BlockStatus::Pinned => {
                let decayed = cfg.pin_decay_enabled
                    && b.fault_key.as_ref().and_then(|k| history.get(k)).is_some_and(|e| {
                        pin_strength(e.last_access_turn, current_turn, cfg) < cfg.pin_evict_strength
                    });
                if !decayed {
                    continue;
                }
                reason = EvictReason::PinDecayed;
            }
            _ => continue,
        }
        if b.size_bytes <= min_size {
            continue;
        }
        if reason != EvictReason::Released {
            let Some((tau, _)) = gates else { continue };
            if crate::wire::age(current_turn, b.turn) <= tau {
                continue;
            }
        }
        if zone == PressureZone::Aggressive
            && b.fault_key.as_ref().and_then(|k| history.get(k)).is_some_and(|e| e.fault_count >= 1)
            && reason != EvictReason::Released
        {
            continue;
        }
        out.push(Candidate { index, category, reason });
    }
    out
}

/// Token-turns spent keeping a page resident (unit token cost factored out).
pub fn keep_cost(size_tokens: u64, resident_turns: u64) -> u64 {
    size_tokens.saturating_mul(resident_turns)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostDecision {
    Keep,
    Evict,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    /// Infinite when the page is never referenced again.
    pub keep_cost: f64,
    pub fault_cost: f64,
    pub decision: CostDecision,
}

impl CostEstimate {
    pub fn savings(&self) -> f64 {
        self.keep_cost - self.fault_cost
    }
}

/// Linear break-even: keeping costs `size × horizon`, faulting costs `size`.
/// `turns_until_next_ref = None` means the page is never referenced again.
pub fn break_even(size_tokens: u64, turns_until_next_ref: Option<u64>) -> CostEstimate {
    let fault_cost = size_tokens as f64;
    let keep_cost = match turns_until_next_ref {
        Some(t) => size_tokens as f64 * t as f64,
        None if size_tokens == 0 => 0.0,
        None => f64::INFINITY,
    };
    let decision = if keep_cost > fault_cost {
        CostDecision::Evict
    } else {
        CostDecision::Keep
    };
    CostEstimate {
        keep_cost,
        fault_cost,
        decision,
    }
}

/// Fault cost under quadratic attention, normalised by the context size so
/// it stays in token units: `(context + page)² / context`.
pub fn quadratic_fault_cost(context_tokens: u64, page_tokens: u64) -> f64 {
    if context_tokens == 0 {
        return page_tokens as f64;
    }
    let n = context_tokens as f64 + page_tokens as f64;
    n * n / context_tokens as f64
}

/// `2^(-(elapsed / half_life))`, in (0, 1].
pub fn pin_strength(last_access_turn: u32, current_turn: u32, cfg: &PolicyConfig) -> f64 {
    let elapsed = current_turn.saturating_sub(last_access_turn) as f64;
    let half_life = cfg.pin_half_life_turns.max(1) as f64;
    (-elapsed / half_life).exp2()
}

/// The argument that names what a tool touched (file path, URL, command...).
pub fn key_param(args: &Value) -> Option<String> {
    const KEYS: [&str; 7] = ["file_path", "notebook_path", "path", "url", "command", "pattern", "query"];
    KEYS.iter()
        .find_map(|k| args.get(*k).and_then(Value::as_str))
        .map(str::to_string)
}
