//! Offline replay: feed recorded sessions through the live paging code
//! and count evictions and faults without calling any API.
//!
//! Each user message in a transcript ends one simulated request (the
//! prefix up to and including it). Every request is turn-indexed,
//! registered and passed to [`page_step`], exactly as the proxy would.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analytics::transcript::{collect_files, load_file, Transcript};
use crate::pagestore::{EvictionCategory, FaultKey, SessionState};
use crate::policy::{self, PolicyConfig, PressureZone};
use crate::proxy::log::{Action, DecisionLogRecord};
use crate::proxy::pipeline::{page_step, Recorder};
use crate::wire::{self, Request, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayOptions {
    pub policy: PolicyConfig,
    /// `None` estimates the zone from each simulated request's size.
    pub zone: Option<PressureZone>,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        ReplayOptions {
            policy: PolicyConfig::default(),
            zone: Some(PressureZone::Involuntary),
        }
    }
}

impl ReplayOptions {
    pub fn with_policy(policy: PolicyConfig) -> Self {
        ReplayOptions {
            policy,
            ..Default::default()
        }
    }
}

/// One paging event, for cross-checking against an oracle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayEvent {
    pub session: String,
    /// Index of the simulated request within its session.
    pub step: usize,
    pub key: FaultKey,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Evicted(EvictionCategory),
    Fault,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub total_evictions: u64,
    pub gc_evictions: u64,
    pub paged_evictions: u64,
    pub faults: u64,
    /// `faults / total_evictions`; null without evictions.
    pub fault_rate_total: Option<f64>,
    /// `faults / paged_evictions`; null without paged evictions.
    pub fault_rate_paged: Option<f64>,
    pub bytes_evicted: u64,
    pub sessions: u64,
    pub steps: u64,
    pub files_read: u64,
    pub files_skipped: u64,
    pub skipped: Vec<String>,
    #[serde(skip)]
    pub events: Vec<ReplayEvent>,
}

impl ReplayReport {
    fn finish_rates(&mut self) {
        self.fault_rate_total = (self.total_evictions > 0).then(|| self.faults as f64 / self.total_evictions as f64);
        self.fault_rate_paged = (self.paged_evictions > 0).then(|| self.faults as f64 / self.paged_evictions as f64);
    }

    /// Associative combination of two reports.
    pub fn merge(mut self, other: ReplayReport) -> ReplayReport {
        self.total_evictions += other.total_evictions;
        self.gc_evictions += other.gc_evictions;
        self.paged_evictions += other.paged_evictions;
        self.faults += other.faults;
        self.bytes_evicted += other.bytes_evicted;
        self.sessions += other.sessions;
        self.steps += other.steps;
        self.files_read += other.files_read;
        self.files_skipped += other.files_skipped;
        self.skipped.extend(other.skipped);
        self.events.extend(other.events);
        self.finish_rates();
        self
    }
}

/// Replay one session.
pub fn replay_transcript(t: &Transcript, opts: &ReplayOptions) -> ReplayReport {
    let cfg = &opts.policy;
    let messages = t.messages();
    let mut state = SessionState::new(t.session_id.clone());
    let mut rec = Recorder::new(&t.session_id, PressureZone::Normal);
    let mut report = ReplayReport {
        sessions: 1,
        ..Default::default()
    };
    let ends: Vec<usize> = messages
        .iter()
        .enumerate()
        .filter(|(_, m)| m.role == Role::User)
        .map(|(i, _)| i + 1)
        .collect();
    for (step, end) in ends.into_iter().enumerate() {
        let mut req = Request::new("replay", messages[..end].to_vec());
        let turn = wire::index_turns(&mut req).unwrap_or(0);
        let reg = state.register_blocks(&req, cfg);
        let zone = opts.zone.unwrap_or_else(|| {
            let bytes = req.serialize().len() as u64;
            policy::compute_zone(policy::estimate_tokens(bytes, cfg), cfg)
        });
        rec.zone = zone;
        rec.turn = turn;
        rec.records.clear();
        let ps = page_step(&mut state, &req, &reg.new_blocks, zone, turn, cfg, &mut rec);
        report.steps += 1;
        for &i in &ps.faults {
            report.faults += 1;
            report.events.push(ReplayEvent {
                session: t.session_id.clone(),
                step,
                key: state.evictions[i].fault_key.clone(),
                kind: EventKind::Fault,
            });
        }
        for &i in &ps.evictions {
            let r = &state.evictions[i];
            report.total_evictions += 1;
            match r.category {
                EvictionCategory::Gc => report.gc_evictions += 1,
                EvictionCategory::Paged => report.paged_evictions += 1,
            }
            report.bytes_evicted += r.size_bytes;
            report.events.push(ReplayEvent {
                session: t.session_id.clone(),
                step,
                key: r.fault_key.clone(),
                kind: EventKind::Evicted(r.category),
            });
        }
    }
    report.finish_rates();
    report
}

pub fn replay(transcripts: &[Transcript], opts: &ReplayOptions) -> ReplayReport {
    let mut out = transcripts
        .iter()
        .map(|t| replay_transcript(t, opts))
        .fold(ReplayReport::default(), ReplayReport::merge);
    out.finish_rates();
    out
}

/// Replay every `.jsonl` file under `paths`, one thread per file.
/// Unreadable files are skipped and listed in the report.
pub fn replay_paths(paths: &[PathBuf], opts: &ReplayOptions) -> ReplayReport {
    let files: Vec<PathBuf> = paths.iter().flat_map(|p| collect_files(p)).collect();
    let mut missing = ReplayReport::default();
    for p in paths {
        if !p.exists() {
            tracing::warn!(path = %p.display(), "trace path does not exist");
            missing.files_skipped += 1;
            missing.skipped.push(p.display().to_string());
        }
    }
    let results: Vec<ReplayReport> = std::thread::scope(|s| {
        let handles: Vec<_> = files.iter().map(|f| s.spawn(move || replay_file(f, opts))).collect();
        handles
            .into_iter()
            .zip(&files)
            .map(|(h, f)| {
                h.join().unwrap_or_else(|_| ReplayReport {
                    files_skipped: 1,
                    skipped: vec![f.display().to_string()],
                    ..Default::default()
                })
            })
            .collect()
    });
    let mut out = results.into_iter().fold(missing, ReplayReport::merge);
    out.finish_rates();
    out
}

fn replay_file(path: &Path, opts: &ReplayOptions) -> ReplayReport {
    match load_file(path) {
        Ok(ts) => {
            if ts.is_empty() {
                if let Ok(records) = crate::proxy::log::read_log(path) {
                    if !records.is_empty() {
                        let mut r = report_from_log(&records);
                        r.files_read = 1;
                        return r;
                    }
                }
            }
            let mut r = replay(&ts, opts);
            r.files_read = 1;
            r
        }
        Err(e) => {
            tracing::warn!(error = %e, "skipping trace file");
            ReplayReport {
                files_skipped: 1,
                skipped: vec![path.display().to_string()],
                ..Default::default()
            }
        }
    }
}

fn detail_field<'a>(detail: &'a str, name: &str) -> Option<&'a str> {
    detail
        .split(' ')
        .find_map(|kv| kv.strip_prefix(name).and_then(|r| r.strip_prefix('=')))
}

/// Tally a decision log recorded by the live proxy.
pub fn report_from_log(records: &[DecisionLogRecord]) -> ReplayReport {
    let mut r = ReplayReport::default();
    let mut sessions = std::collections::BTreeSet::new();
    for rec in records {
        sessions.insert(rec.session_id.as_str());
        match rec.action {
            Action::Evict => {
                r.total_evictions += 1;
                match detail_field(&rec.detail, "category") {
                    Some("paged") => r.paged_evictions += 1,
                    _ => r.gc_evictions += 1,
                }
                r.bytes_evicted += detail_field(&rec.detail, "size").and_then(|s| s.parse::<u64>().ok()).unwrap_or(0);
            }
            Action::Fault => r.faults += 1,
            Action::Forward => r.steps += 1,
            _ => {}
        }
    }
    r.sessions = sessions.len() as u64;
    r.finish_rates();
    r
}
