//! Demand paging for LLM context windows.
//!
//! A Messages-API client resends its whole conversation on every call.
//! This crate sits between client and API, evicts stale tool results from
//! the resent history, replaces them with short retrieval handles, notices
//! when the model asks for evicted content again (a page fault), and pins
//! what faulted. The same policy code drives an offline replay harness.
//!
//! Modules, bottom up:
//!
//! - [`wire`]: request and SSE parsing with byte-faithful passthrough
//! - [`pagestore`]: per-session page table, fault history, checkpoints
//! - [`policy`]: classification, pressure zones, eviction selection, cost model
//! - [`handles`]: tombstone templates
//! - [`cooperative`]: phantom tools, cleanup tags, advisories
//! - [`trimming`]: tool stubs, skill dedup, static-segment tracking
//! - [`proxy`]: the request pipeline and HTTP service
//! - [`analytics`]: probe, replay, cost curves, reference-string simulation
//! - [`cli`]: configuration loading and subcommand dispatch

pub mod analytics;
pub mod cli;
pub mod cooperative;
pub mod handles;
pub mod pagestore;
pub mod policy;
pub mod proxy;
pub mod trimming;
pub mod wire;

pub use pagestore::{BlockMeta, BlockStatus, ContentHash, EvictionCategory, EvictionRecord, FaultKey, SessionState};
pub use policy::{PolicyConfig, PressureZone};
