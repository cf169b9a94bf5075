//! Request rewriting, independent of any transport.
//!
//! [`Engine::run`] takes a parsed client request and the session it belongs
//! to and produces the bytes to forward plus decision-log records. All work
//! happens on a copy of the session, committed only when every stage
//! succeeded; any error or panic forwards the original bytes instead.

use std::panic::{catch_unwind, AssertUnwindSafe};

use crate::cooperative::{self, InterceptOutcome, PhantomCall};
use crate::handles;
use crate::pagestore::{Access, BlockStatus, SessionState};
use crate::policy::{self, EvictReason, PolicyConfig, PressureZone};
use crate::proxy::log::{now_rfc3339, Action, DecisionLogRecord};
use crate::proxy::{derive_session_id, ProxyConfig};
use crate::trimming;
use crate::wire::{self, BlockKind, Request, Role};

/// Pipeline stages, in execution order. Used for fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Parse,
    Session,
    Prepare,
    IndexTurns,
    Register,
    NoteToolUse,
    DetectFaults,
    Directives,
    Evict,
    Mutate,
    Advisory,
    Stub,
    Dedup,
    InjectPhantom,
    Serialize,
}

impl Stage {
    pub const ALL: [Stage; 15] = [
        Stage::Parse,
        Stage::Session,
        Stage::Prepare,
        Stage::IndexTurns,
        Stage::Register,
        Stage::NoteToolUse,
        Stage::DetectFaults,
        Stage::Directives,
        Stage::Evict,
        Stage::Mutate,
        Stage::Advisory,
        Stage::Stub,
        Stage::Dedup,
        Stage::InjectPhantom,
        Stage::Serialize,
    ];
}

/// Make one stage fail, by error or by panic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultInjection {
    pub stage: Stage,
    pub panic: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("parse error: {0}")]
    Parse(#[from] wire::ParseError),
    #[error("injected fault at {0:?}")]
    Injected(Stage),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Observed,
    Transformed,
    FailOpen,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RequestStats {
    pub received_bytes: usize,
    pub forwarded_bytes: usize,
    pub advisory_bytes: usize,
    pub phantom_bytes: usize,
    pub evicted_bytes: u64,
    pub estimated_tokens: u64,
}

impl RequestStats {
    /// Bytes removed by the pipeline, not counting what it added itself.
    pub fn saved_bytes(&self) -> i64 {
        self.received_bytes as i64 - self.forwarded_bytes as i64 + self.advisory_bytes as i64 + self.phantom_bytes as i64
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub forwarded: Vec<u8>,
    pub session_id: String,
    pub outcome: Outcome,
    pub records: Vec<DecisionLogRecord>,
    pub zone: PressureZone,
    pub turn: u32,
    /// Messages in the client's request; the response lands at this index.
    pub client_message_count: usize,
    pub stats: RequestStats,
    pub fail_reason: Option<String>,
}

/// Builds log records that share session, turn and zone.
#[derive(Debug, Clone)]
pub struct Recorder {
    pub session_id: String,
    pub turn: u32,
    pub zone: PressureZone,
    pub records: Vec<DecisionLogRecord>,
}

impl Recorder {
    pub fn new(session_id: &str, zone: PressureZone) -> Self {
        Recorder {
            session_id: session_id.to_string(),
            turn: 0,
            zone,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, action: Action, subject: impl Into<String>, bytes_delta: i64, detail: impl Into<String>) {
        self.records.push(DecisionLogRecord {
            timestamp: now_rfc3339(),
            session_id: self.session_id.clone(),
            turn: self.turn,
            zone: self.zone.as_str().to_string(),
            action,
            subject: subject.into(),
            bytes_delta,
            detail: detail.into(),
        });
    }
}

/// Counters from one paging pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PageStep {
    pub faults: Vec<usize>,
    pub evictions: Vec<usize>,
    pub evicted_bytes: u64,
}

/// Fault detection on the newly registered blocks, pin refresh, then
/// eviction selection and recording. Shared by the live pipeline and the
/// replay harness.
pub fn page_step(
    state: &mut SessionState,
    req: &Request,
    new_blocks: &[usize],
    zone: PressureZone,
    turn: u32,
    cfg: &PolicyConfig,
    rec: &mut Recorder,
) -> PageStep {
    let mut step = PageStep::default();
    detect_faults(state, new_blocks, turn, rec, &mut step);
    log_pin_changes(state, rec);
    evict(state, req, zone, turn, cfg, rec, &mut step);
    step
}

fn detect_faults(state: &mut SessionState, new_blocks: &[usize], turn: u32, rec: &mut Recorder, step: &mut PageStep) {
    for &i in new_blocks {
        let b = &state.blocks[i];
        if b.kind != BlockKind::ToolResult || b.is_error {
            continue;
        }
        let Some(key) = b.fault_key.clone() else { continue };
        let hash = b.content_hash;
        match state.observe_access(&key, hash, turn) {
            Access::Fault { record, update } => {
                step.faults.push(record);
                let r = &state.evictions[record];
                rec.push(
                    Action::Fault,
                    key.to_string(),
                    0,
                    format!(
                        "evicted_block={} evicted_at_turn={} same_content={} fault_count={}",
                        r.block_id,
                        r.evicted_at_turn,
                        r.content_hash == hash,
                        update.fault_count
                    ),
                );
            }
            Access::Unpinned | Access::PinnedHit | Access::Plain => {}
        }
    }
}

fn log_pin_changes(state: &mut SessionState, rec: &mut Recorder) {
    for (i, pinned) in state.refresh_pins() {
        let b = &state.blocks[i];
        let key = b.fault_key.as_ref().map(ToString::to_string).unwrap_or_default();
        if pinned {
            rec.push(Action::Pin, b.block_id.clone(), 0, format!("key={key}"));
        } else {
            rec.push(Action::Unpin, b.block_id.clone(), 0, format!("key={key} content changed"));
        }
    }
}

fn block_body(req: &Request, state: &SessionState, i: usize) -> String {
    let b = &state.blocks[i];
    req.messages
        .get(b.message_index)
        .and_then(|m| m.blocks.get(b.block_index))
        .map(|cb| cb.body())
        .unwrap_or_default()
}

fn evict(
    state: &mut SessionState,
    req: &Request,
    zone: PressureZone,
    turn: u32,
    cfg: &PolicyConfig,
    rec: &mut Recorder,
    step: &mut PageStep,
) {
    let candidates = policy::select_evictions(&state.blocks, &state.fault_history, zone, turn, cfg);
    for c in candidates {
        if c.reason == EvictReason::PinDecayed {
            let b = &mut state.blocks[c.index];
            b.status = BlockStatus::Resident;
            if let Some(e) = b.fault_key.as_ref().and_then(|k| state.fault_history.get_mut(k)) {
                e.pinned = false;
            }
            rec.push(Action::Unpin, b.block_id.clone(), 0, "pin decayed below threshold");
        }
        let body = block_body(req, state, c.index);
        match state.record_eviction(c.index, c.category, &body, turn) {
            Ok(r) => {
                let handle = handles::render_handle(&r);
                step.evictions.push(state.evictions.len() - 1);
                step.evicted_bytes += r.size_bytes;
                rec.push(
                    Action::Evict,
                    r.block_id.clone(),
                    handle.len() as i64 - r.size_bytes as i64,
                    format!(
                        "category={} reason={:?} key={} size={} age={}",
                        match r.category {
                            crate::pagestore::EvictionCategory::Gc => "gc",
                            crate::pagestore::EvictionCategory::Paged => "paged",
                        },
                        c.reason,
                        r.fault_key,
                        r.size_bytes,
                        wire::age(turn, state.blocks[c.index].turn)
                    ),
                );
            }
            Err(e) => tracing::warn!(error = %e, "policy selected an ineligible block"),
        }
    }
}

/// Replace evicted and summarized blocks, then apply collapses.
pub fn apply_mutations(fwd: &mut Request, state: &SessionState) {
    for b in &state.blocks {
        let text = match b.status {
            BlockStatus::Evicted => match state.eviction_for(&b.block_id) {
                Some(r) => handles::render_handle(r),
                None => continue,
            },
            BlockStatus::Summarized => match &b.summary {
                Some(s) => s.clone(),
                None => continue,
            },
            _ => continue,
        };
        if let Some(cb) = fwd.messages.get_mut(b.message_index).and_then(|m| m.blocks.get_mut(b.block_index)) {
            cb.replace_body(text);
        }
    }
    cooperative::apply_collapses(fwd, &state.collapses);
}

/// Text of the newest assistant message with its index.
fn newest_assistant(req: &Request) -> Option<(usize, String)> {
    req.messages
        .iter()
        .enumerate()
        .rev()
        .find(|(_, m)| m.role == Role::Assistant)
        .map(|(i, m)| (i, m.text()))
}

#[derive(Debug, Clone)]
pub struct Engine {
    pub config: ProxyConfig,
    /// Forces a zone instead of estimating one (replay, tests).
    pub zone_override: Option<PressureZone>,
    pub fault: Option<FaultInjection>,
}

impl Engine {
    pub fn new(config: ProxyConfig) -> Self {
        Engine {
            config,
            zone_override: None,
            fault: None,
        }
    }

    pub fn with_fault(mut self, fault: FaultInjection) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn with_zone(mut self, zone: PressureZone) -> Self {
        self.zone_override = Some(zone);
        self
    }

    pub fn check(&self, stage: Stage) -> Result<(), PipelineError> {
        match self.fault {
            Some(f) if f.stage == stage && f.panic => panic!("injected panic at {stage:?}"),
            Some(f) if f.stage == stage => Err(PipelineError::Injected(stage)),
            _ => Ok(()),
        }
    }

    /// Parse and identify. An error here means the raw bytes go upstream.
    pub fn parse(&self, raw: &[u8], session_header: Option<&str>) -> Result<(Request, String), String> {
        let r = catch_unwind(AssertUnwindSafe(|| -> Result<(Request, String), PipelineError> {
            self.check(Stage::Parse)?;
            let req = wire::parse_request(raw)?;
            self.check(Stage::Session)?;
            let id = derive_session_id(&req, session_header);
            Ok((req, id))
        }));
        match r {
            Ok(Ok(v)) => Ok(v),
            Ok(Err(e)) => Err(e.to_string()),
            Err(_) => Err("panic while parsing".into()),
        }
    }

    /// Records for a request forwarded untouched because of `reason`.
    pub fn fail_open(&self, raw: &[u8], session_id: &str, reason: &str) -> Prepared {
        let mut rec = Recorder::new(session_id, PressureZone::Normal);
        rec.push(
            Action::Forward,
            "request",
            0,
            format!("fail-open: {reason}; received={} forwarded={}", raw.len(), raw.len()),
        );
        Prepared {
            forwarded: raw.to_vec(),
            session_id: session_id.to_string(),
            outcome: Outcome::FailOpen,
            records: rec.records,
            zone: PressureZone::Normal,
            turn: 0,
            client_message_count: 0,
            stats: RequestStats {
                received_bytes: raw.len(),
                forwarded_bytes: raw.len(),
                ..Default::default()
            },
            fail_reason: Some(reason.to_string()),
        }
    }

    /// Parse, then [`Engine::run`]; any failure forwards `raw` untouched.
    pub fn process(&self, raw: &[u8], session_header: Option<&str>, state: &mut SessionState) -> Prepared {
        match self.parse(raw, session_header) {
            Ok((req, _)) => self.run(raw, req, state),
            Err(reason) => self.fail_open(raw, &state.session_id, &reason),
        }
    }

    pub fn run(&self, raw: &[u8], req: Request, state: &mut SessionState) -> Prepared {
        let session_id = state.session_id.clone();
        if self.config.mode == crate::proxy::Mode::Observe {
            let mut rec = Recorder::new(&session_id, PressureZone::Normal);
            rec.turn = req.messages.iter().filter(|m| m.counts_as_user_turn()).count().saturating_sub(1) as u32;
            rec.push(
                Action::Forward,
                "request",
                0,
                format!("observe; received={} forwarded={}", raw.len(), raw.len()),
            );
            return Prepared {
                forwarded: raw.to_vec(),
                session_id,
                outcome: Outcome::Observed,
                records: rec.records,
                zone: PressureZone::Normal,
                turn: rec.turn,
                client_message_count: req.messages.len(),
                stats: RequestStats {
                    received_bytes: raw.len(),
                    forwarded_bytes: raw.len(),
                    ..Default::default()
                },
                fail_reason: None,
            };
        }
        let mut work = state.clone();
        let result = catch_unwind(AssertUnwindSafe(|| self.transform(raw, req, &mut work)));
        match result {
            Ok(Ok(p)) => {
                *state = work;
                p
            }
            Ok(Err(e)) => {
                tracing::warn!(error = %e, "pipeline failed; forwarding original request");
                self.fail_open(raw, &session_id, &e.to_string())
            }
            Err(_) => {
                tracing::error!("pipeline panicked; forwarding original request");
                self.fail_open(raw, &session_id, "internal panic")
            }
        }
    }

    fn transform(&self, raw: &[u8], mut req: Request, work: &mut SessionState) -> Result<Prepared, PipelineError> {
        let cfg = &self.config;
        let pol = &cfg.policy;
        let compact = cfg.mode.compacts();
        let phantom = compact && cfg.phantom_enabled;
        let received = raw.len();
        let estimated_tokens = work
            .last_usage_tokens
            .unwrap_or_else(|| policy::estimate_tokens(received as u64, pol));
        let zone = self.zone_override.unwrap_or_else(|| policy::compute_zone(estimated_tokens, pol));
        let mut rec = Recorder::new(&work.session_id, zone);
        let mut stats = RequestStats {
            received_bytes: received,
            estimated_tokens,
            ..Default::default()
        };
        let client_message_count = req.messages.len();

        self.check(Stage::Prepare)?;
        if compact {
            cooperative::strip_advisories(&mut req);
        }
        if phantom {
            for p in std::mem::take(&mut work.pending_phantom_results) {
                let bytes = p.content.len() as i64;
                rec.push(
                    Action::Phantom,
                    p.tool_use_id.clone(),
                    bytes,
                    format!("{} result delivered for {:?}", p.tool.name(), p.paths),
                );
                stats.phantom_bytes += p.content.len();
                work.phantom_exchanges.push(p);
            }
            cooperative::apply_phantom_exchanges(&mut req, &mut work.phantom_exchanges);
        }

        self.check(Stage::IndexTurns)?;
        let turn = wire::index_turns(&mut req).unwrap_or(0);
        rec.turn = turn;

        self.check(Stage::Register)?;
        let reg = work.register_blocks(&req, pol);

        self.check(Stage::NoteToolUse)?;
        if cfg.mode.trims() {
            for name in trimming::note_tool_use(&mut work.stubs, &req) {
                rec.push(Action::Stub, name, 0, "restored full definition after first use");
            }
        }
        let statics = trimming::track_static(&req, &work.static_hashes);
        work.static_hashes = statics.hashes();

        let mut step = PageStep::default();
        if compact {
            self.check(Stage::DetectFaults)?;
            detect_faults(work, &reg.new_blocks, turn, &mut rec, &mut step);
            log_pin_changes(work, &mut rec);

            self.check(Stage::Directives)?;
            if let Some((idx, text)) = newest_assistant(&req) {
                let source = crate::pagestore::ContentHash::of(format!("{idx}\u{0}{text}").as_bytes()).hex();
                if work.last_directive_source.as_deref() != Some(source.as_str()) {
                    let (directives, rejected) = cooperative::parse_cleanup_tags_detailed(&text);
                    for line in rejected {
                        rec.push(Action::Directive, "malformed", 0, format!("ignored: {line}"));
                    }
                    if !directives.is_empty() {
                        let report = cooperative::apply_directives(&directives, work, &req, turn, pol);
                        for a in &report.applied {
                            rec.push(
                                Action::Directive,
                                a.directive.block_id().map(str::to_string).unwrap_or_else(|| {
                                    let (s, e) = a.directive.turn_range().unwrap_or_default();
                                    format!("turns {s}-{e}")
                                }),
                                a.bytes_delta,
                                format!("{} applied to {}", a.directive.kind_str(), a.blocks.join(",")),
                            );
                        }
                        for (d, why) in &report.skipped {
                            rec.push(
                                Action::Directive,
                                d.block_id().unwrap_or("range"),
                                0,
                                format!("{} skipped: {why}", d.kind_str()),
                            );
                        }
                    }
                    work.last_directive_source = Some(source);
                }
            }

            self.check(Stage::Evict)?;
            evict(work, &req, zone, turn, pol, &mut rec, &mut step);
            stats.evicted_bytes = step.evicted_bytes;
        }
        work.last_message_count = client_message_count;

        self.check(Stage::Mutate)?;
        let mut fwd = req;
        if compact {
            apply_mutations(&mut fwd, work);
        }

        self.check(Stage::Advisory)?;
        if compact {
            if let Some(a) = cooperative::build_advisory(work, zone, estimated_tokens, pol) {
                let text = a.render(pol);
                if cooperative::inject_advisory(&mut fwd, &text) {
                    stats.advisory_bytes = text.len();
                    rec.push(
                        Action::Advisory,
                        "request",
                        text.len() as i64,
                        format!("fill={:.1}% largest={}", a.fill_percent, a.largest_blocks.len()),
                    );
                }
            }
        }

        self.check(Stage::Stub)?;
        if cfg.mode.trims() {
            let r = trimming::stub_tools(&mut fwd, &mut work.stubs);
            if !r.stubbed.is_empty() {
                rec.push(
                    Action::Stub,
                    "tools",
                    -(r.bytes_saved as i64),
                    format!("stubbed {} of {}: {}", r.stubbed.len(), fwd.tools.len(), r.stubbed.join(",")),
                );
            }
        }

        self.check(Stage::Dedup)?;
        if cfg.mode.trims() {
            let r = trimming::dedup_skills(&mut fwd, &cfg.skill_prefixes);
            if !r.removed.is_empty() {
                rec.push(
                    Action::Dedup,
                    "skills",
                    -(r.bytes_saved as i64),
                    format!("removed {} duplicate entries", r.removed.len()),
                );
            }
        }

        self.check(Stage::InjectPhantom)?;
        if phantom {
            stats.phantom_bytes += cooperative::inject_phantom_tools(&mut fwd);
            stats.phantom_bytes += work
                .phantom_exchanges
                .iter()
                .map(|x| x.content.len() + x.tool_use_id.len() * 2 + 160)
                .sum::<usize>();
        }

        self.check(Stage::Serialize)?;
        let forwarded = fwd.serialize();
        stats.forwarded_bytes = forwarded.len();
        let stable = statics
            .segments
            .iter()
            .filter(|s| s.status == trimming::SegmentStatus::Stable)
            .count();
        rec.push(
            Action::Forward,
            "request",
            forwarded.len() as i64 - received as i64,
            format!(
                "received={received} forwarded={} saved={} static_stable={stable}/{} static_stable_bytes={}",
                forwarded.len(),
                stats.saved_bytes(),
                statics.segments.len(),
                statics.stable_bytes()
            ),
        );
        Ok(Prepared {
            forwarded,
            session_id: work.session_id.clone(),
            outcome: Outcome::Transformed,
            records: rec.records,
            zone,
            turn,
            client_message_count,
            stats,
            fail_reason: None,
        })
    }

    /// Bookkeeping once the upstream response is complete: usage for the
    /// next zone estimate and execution of intercepted phantom calls.
    pub fn finalize(&self, state: &mut SessionState, prepared: &Prepared, outcome: &InterceptOutcome) -> Vec<DecisionLogRecord> {
        let mut rec = Recorder::new(&state.session_id, prepared.zone);
        rec.turn = prepared.turn;
        if prepared.outcome == Outcome::Transformed {
            if let Some(t) = outcome.effective_input_tokens() {
                state.last_usage_tokens = Some(t);
            }
        }
        for call in &outcome.calls {
            self.run_phantom(state, prepared, call, &mut rec);
        }
        rec.records
    }

    fn run_phantom(&self, state: &mut SessionState, prepared: &Prepared, call: &PhantomCall, rec: &mut Recorder) {
        let effect = cooperative::execute_phantom(call, state, prepared.client_message_count, prepared.turn);
        for &i in &effect.faults {
            let r = &state.evictions[i];
            rec.push(Action::Fault, r.fault_key.to_string(), 0, format!("memory_fault restored {}", r.block_id));
        }
        rec.push(
            Action::Phantom,
            call.tool_use_id.clone(),
            0,
            format!(
                "{} paths={:?} released={} restored={} missed={}",
                call.tool.name(),
                call.paths,
                effect.released.len(),
                effect.restored.len(),
                effect.missed.len()
            ),
        );
        if let Some(inj) = effect.injection {
            state.pending_phantom_results.push(inj);
        }
    }
}
