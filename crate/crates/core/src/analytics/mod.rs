//! Offline instruments: transcript probing, eviction replay, cost curves
//! and reference-string simulation.

pub mod cost;
pub mod refsim;
pub mod replay;
pub mod synth;
pub mod transcript;

pub use crate::policy::estimate_tokens;
pub use cost::{cost_curve, request_sizes, CostCurve, CostError, CostPoint};
pub use replay::{replay, replay_paths, replay_transcript, report_from_log, EventKind, ReplayEvent, ReplayOptions, ReplayReport};
pub use transcript::{
    amplification_factor, amplification_factor_managed, load_file, parse_jsonl, probe, tool_overhead, Overhead,
    ProbeReport, Transcript, TranscriptRecord,
};
