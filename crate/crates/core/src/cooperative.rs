//! Channels through which the model takes part in memory management.
//!
//! Proxy to model: two phantom tools (`memory_release`, `memory_fault`)
//! that the client framework never sees, plus an advisory block under
//! memory pressure. Model to proxy: line-structured cleanup tags.

use std::collections::{BTreeSet, HashSet};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::handles;
use crate::pagestore::{BlockStatus, CollapseRecord, EvictionCategory, SessionState};
use crate::policy::{self, PolicyConfig, PressureZone};
use crate::wire::{BlockKind, ContentBlock, Message, Request, Role, StreamEvent, ToolDef};

pub const MEMORY_RELEASE: &str = "memory_release";
pub const MEMORY_FAULT: &str = "memory_fault";
pub const PHANTOM_TOOL_NAMES: [&str; 2] = [MEMORY_RELEASE, MEMORY_FAULT];
pub const PHANTOM_ID_PREFIX: &str = "phantom-";
pub const ADVISORY_OPEN: &str = "<memory-pressure>";
pub const ADVISORY_CLOSE: &str = "</memory-pressure>";

pub fn is_phantom(name: &str) -> bool {
    PHANTOM_TOOL_NAMES.contains(&name)
}

fn paths_schema(what: &str) -> Value {
    json!({
        "type": "object",
        "properties": {"paths": {"type": "array", "items": {"type": "string"}, "description": what}},
        "required": ["paths"]
    })
}

pub fn phantom_defs() -> [ToolDef; 2] {
    [
        ToolDef::new(
            MEMORY_RELEASE,
            "Release context you no longer need. Listed file paths (or block ids) are evicted on the next turn.",
            paths_schema("File paths or block ids to release"),
        ),
        ToolDef::new(
            MEMORY_FAULT,
            "Restore evicted content from the proxy cache without re-running the original tool.",
            paths_schema("File paths to restore"),
        ),
    ]
}

/// Append the two phantom definitions, first removing any copies already
/// present. Returns the bytes added.
pub fn inject_phantom_tools(req: &mut Request) -> usize {
    let before: usize = req.tools.iter().map(ToolDef::byte_size).sum();
    req.tools.retain(|t| !is_phantom(t.name()));
    req.tools.extend(phantom_defs());
    let after: usize = req.tools.iter().map(ToolDef::byte_size).sum();
    after.saturating_sub(before)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomTool {
    MemoryRelease,
    MemoryFault,
}

impl PhantomTool {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            MEMORY_RELEASE => Some(PhantomTool::MemoryRelease),
            MEMORY_FAULT => Some(PhantomTool::MemoryFault),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PhantomTool::MemoryRelease => MEMORY_RELEASE,
            PhantomTool::MemoryFault => MEMORY_FAULT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhantomCall {
    pub tool: PhantomTool,
    pub paths: Vec<String>,
    pub tool_use_id: String,
}

impl PhantomCall {
    pub fn from_tool_use(name: &str, id: &str, input: &Value) -> Option<Self> {
        let tool = PhantomTool::from_name(name)?;
        let paths = match input.get("paths") {
            Some(Value::Array(items)) => items.iter().filter_map(Value::as_str).map(str::to_string).collect(),
            Some(Value::String(s)) => vec![s.clone()],
            _ => Vec::new(),
        };
        Some(PhantomCall {
            tool,
            paths,
            tool_use_id: id.to_string(),
        })
    }
}

/// Removes phantom tool_use blocks from a streamed response, one event at
/// a time. Everything else is re-emitted untouched; later block indices are
/// shifted down to close the gap. If phantom calls were the only tool uses,
/// a `tool_use` stop reason becomes `end_turn` so the client does not wait
/// for results it will never be asked for.
#[derive(Debug, Default)]
pub struct StreamInterceptor {
    removed: BTreeSet<u64>,
    open_phantom: Option<(u64, String, String, String)>,
    calls: Vec<PhantomCall>,
    real_tool_uses: usize,
    failed: bool,
    stop_rewritten: bool,
    usage: Map<String, Value>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InterceptOutcome {
    pub calls: Vec<PhantomCall>,
    /// The stream was malformed; everything after the problem passed raw.
    pub failed: bool,
    pub stop_rewritten: bool,
    pub usage: Map<String, Value>,
}

impl InterceptOutcome {
    /// input + cache-creation + cache-read tokens.
    pub fn effective_input_tokens(&self) -> Option<u64> {
        effective_input_tokens(&self.usage)
    }
}

pub fn effective_input_tokens(usage: &Map<String, Value>) -> Option<u64> {
    let keys = ["input_tokens", "cache_creation_input_tokens", "cache_read_input_tokens"];
    let vals: Vec<u64> = keys.iter().filter_map(|k| usage.get(*k).and_then(Value::as_u64)).collect();
    (!vals.is_empty()).then(|| vals.iter().sum())
}

fn merge_usage(into: &mut Map<String, Value>, from: Option<&Value>) {
    if let Some(Value::Object(m)) = from {
        for (k, v) in m {
            if !v.is_null() {
                into.insert(k.clone(), v.clone());
            }
        }
    }
}

impl StreamInterceptor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self) -> &[PhantomCall] {
        &self.calls
    }

    fn shifted(&self, index: u64) -> u64 {
        index - self.removed.range(..index).count() as u64
    }

    fn fail(&mut self) {
        self.failed = true;
        self.open_phantom = None;
    }

    /// `None` means the event is swallowed.
    pub fn process(&mut self, ev: StreamEvent) -> Option<StreamEvent> {
        if self.failed {
            return Some(ev);
        }
        let Some(data) = ev.json() else {
            if ev.data.trim().is_empty() {
                return Some(ev);
            }
            // Non-JSON payloads are legal SSE; only our own event types must parse.
            if matches!(ev.event.as_deref(), Some(e) if e.starts_with("content_block")) {
                self.fail();
            }
            return Some(ev);
        };
        let kind = data.get("type").and_then(Value::as_str).unwrap_or_default().to_string();
        match kind.as_str() {
            "message_start" => {
                merge_usage(&mut self.usage, data.get("message").and_then(|m| m.get("usage")));
                Some(ev)
            }
            "content_block_start" | "content_block_delta" | "content_block_stop" => self.block_event(ev, data, &kind),
            "message_delta" => {
                merge_usage(&mut self.usage, data.get("usage"));
                let stop = data.pointer("/delta/stop_reason").and_then(Value::as_str);
                if stop == Some("tool_use") && !self.calls.is_empty() && self.real_tool_uses == 0 {
                    let mut data = data.clone();
                    data["delta"]["stop_reason"] = Value::String("end_turn".into());
                    self.stop_rewritten = true;
                    return Some(ev.with_data(&data));
                }
                Some(ev)
            }
            _ => Some(ev),
        }
    }

    fn block_event(&mut self, ev: StreamEvent, data: Value, kind: &str) -> Option<StreamEvent> {
        let Some(index) = data.get("index").and_then(Value::as_u64) else {
            self.fail();
            return Some(ev);
        };
        if let Some((open, _, _, buf)) = &mut self.open_phantom {
            if *open == index {
                match kind {
                    "content_block_delta" => {
                        if let Some(p) = data.pointer("/delta/partial_json").and_then(Value::as_str) {
                            buf.push_str(p);
                        }
                    }
                    "content_block_stop" => {
                        let (_, id, name, buf) = self.open_phantom.take().expect("checked above");
                        let input = if buf.trim().is_empty() {
                            Value::Object(Map::new())
                        } else {
                            serde_json::from_str(&buf).unwrap_or(Value::Null)
                        };
                        if let Some(call) = PhantomCall::from_tool_use(&name, &id, &input) {
                            self.calls.push(call);
                        }
                    }
                    _ => {}
                }
                return None;
            }
        }
        if kind == "content_block_start" {
            let block = data.get("content_block");
            let btype = block.and_then(|b| b.get("type")).and_then(Value::as_str);
            if btype == Some("tool_use") {
                let name = block.and_then(|b| b.get("name")).and_then(Value::as_str).unwrap_or_default();
                if is_phantom(name) {
                    let id = block.and_then(|b| b.get("id")).and_then(Value::as_str).unwrap_or_default();
                    let mut buf = String::new();
                    if let Some(inp) = block.and_then(|b| b.get("input")) {
                        if inp.as_object().is_some_and(|m| !m.is_empty()) {
                            buf = inp.to_string();
                        }
                    }
                    self.removed.insert(index);
                    self.open_phantom = Some((index, id.to_string(), name.to_string(), buf));
                    return None;
                }
                self.real_tool_uses += 1;
            }
        }
        let new_index = self.shifted(index);
        if new_index == index {
            return Some(ev);
        }
        let mut data = data;
        data["index"] = Value::from(new_index);
        Some(ev.with_data(&data))
    }

    pub fn finish(self) -> InterceptOutcome {
        InterceptOutcome {
            calls: if self.failed { Vec::new() } else { self.calls },
            failed: self.failed,
            stop_rewritten: self.stop_rewritten,
            usage: self.usage,
        }
    }
}

/// Whole-stream form of [`StreamInterceptor`]. A stream that does not
/// reassemble is returned untouched with no calls.
pub fn intercept_stream(events: &[StreamEvent]) -> (Vec<StreamEvent>, Vec<PhantomCall>) {
    if crate::wire::reassemble(events).is_err() {
        return (events.to_vec(), Vec::new());
    }
    let mut ic = StreamInterceptor::new();
    let out: Vec<StreamEvent> = events.iter().cloned().filter_map(|e| ic.process(e)).collect();
    let outcome = ic.finish();
    if outcome.failed {
        return (events.to_vec(), Vec::new());
    }
    (out, outcome.calls)
}

/// Non-streamed responses: strip phantom tool_use blocks from `content`.
/// `None` when the body is not a message or contains no phantom calls.
/// Rewritten body, intercepted calls, and the response usage.
pub type InterceptedJson = (Vec<u8>, Vec<PhantomCall>, Map<String, Value>);

pub fn intercept_json(body: &[u8]) -> Option<InterceptedJson> {
    let mut v: Value = serde_json::from_slice(body).ok()?;
    let usage = v.get("usage").and_then(Value::as_object).cloned().unwrap_or_default();
    let content = v.get_mut("content")?.as_array_mut()?;
    let mut calls = Vec::new();
    content.retain(|b| {
        if b.get("type").and_then(Value::as_str) != Some("tool_use") {
            return true;
        }
        let name = b.get("name").and_then(Value::as_str).unwrap_or_default();
        let id = b.get("id").and_then(Value::as_str).unwrap_or_default();
        match PhantomCall::from_tool_use(name, id, b.get("input").unwrap_or(&Value::Null)) {
            Some(c) => {
                calls.push(c);
                false
            }
            None => true,
        }
    });
    if calls.is_empty() {
        return None;
    }
    let real = content.iter().any(|b| b.get("type").and_then(Value::as_str) == Some("tool_use"));
    if !real && v.get("stop_reason").and_then(Value::as_str) == Some("tool_use") {
        v["stop_reason"] = Value::String("end_turn".into());
    }
    Some((serde_json::to_vec(&v).ok()?, calls, usage))
}

/// A synthetic tool_use/tool_result pair answering one phantom call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingInjection {
    /// Index, in the client's own message numbering, of the assistant
    /// message whose response carried the call.
    pub assistant_index: usize,
    pub tool_use_id: String,
    pub tool: PhantomTool,
    pub paths: Vec<String>,
    pub content: String,
    pub is_error: bool,
}

/// A delivered exchange. The client never saw it, so it is spliced back
/// into every later request at the same place.
pub type PhantomExchange = PendingInjection;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhantomEffect {
    pub injection: Option<PendingInjection>,
    /// Block ids newly marked released.
    pub released: Vec<String>,
    /// Paths answered from the content cache.
    pub restored: Vec<String>,
    pub missed: Vec<String>,
    /// Eviction record indices whose fault this call counted.
    pub faults: Vec<usize>,
}

/// Run one phantom call against the session.
///
/// `memory_release` marks matching resident tool results as released so the
/// next eviction pass takes them regardless of age. `memory_fault` answers
/// from the eviction cache and counts as a fault on the original key.
pub fn execute_phantom(call: &PhantomCall, state: &mut SessionState, assistant_index: usize, turn: u32) -> PhantomEffect {
    let mut effect = PhantomEffect::default();
    let content = match call.tool {
        PhantomTool::MemoryRelease => {
            for p in &call.paths {
                let id = p.strip_prefix("block:").unwrap_or(p);
                for b in state.blocks.iter_mut() {
                    let hit = b.block_id == id || b.key_param.as_deref() == Some(p.as_str());
                    if hit && b.kind == BlockKind::ToolResult && b.status.is_resident() && !b.released {
                        b.released = true;
                        effect.released.push(b.block_id.clone());
                    }
                }
            }
            format!("Released {} block(s); they will be evicted on the next turn.", effect.released.len())
        }
        PhantomTool::MemoryFault => {
            let mut parts = Vec::new();
            for p in &call.paths {
                let hit = state
                    .evictions
                    .iter()
                    .rposition(|r| r.category == EvictionCategory::Paged && r.key_param == *p && r.cached_body.is_some());
                match hit {
                    Some(i) => {
                        let body = state.evictions[i].cached_body.clone().expect("checked");
                        let hash = state.evictions[i].content_hash;
                        state.apply_fault(i, hash, turn);
                        effect.faults.push(i);
                        effect.restored.push(p.clone());
                        if call.paths.len() == 1 {
                            parts.push(body.to_string());
                        } else {
                            parts.push(format!("=== {p} ===\n{body}"));
                        }
                    }
                    None => {
                        effect.missed.push(p.clone());
                        parts.push(format!("content not cached; use Read {p}"));
                    }
                }
            }
            if parts.is_empty() {
                "No paths given.".to_string()
            } else {
                parts.join("\n")
            }
        }
    };
    effect.injection = Some(PendingInjection {
        assistant_index,
        tool_use_id: format!("{PHANTOM_ID_PREFIX}{}", call.tool_use_id),
        tool: call.tool,
        paths: call.paths.clone(),
        content,
        is_error: false,
    });
    effect
}

/// Splice delivered exchanges back into a client request. Exchanges whose
/// anchor is gone (history rewritten by the client) are dropped from
/// `exchanges`. Returns how many were applied.
pub fn apply_phantom_exchanges(req: &mut Request, exchanges: &mut Vec<PendingInjection>) -> usize {
    let n = req.messages.len();
    exchanges.retain(|x| x.assistant_index < n);
    let mut order: Vec<&PendingInjection> = exchanges.iter().collect();
    order.sort_by_key(|x| std::cmp::Reverse(x.assistant_index));
    let mut by_index: Vec<(usize, Vec<&PendingInjection>)> = Vec::new();
    for x in order {
        match by_index.last_mut() {
            Some((i, v)) if *i == x.assistant_index => v.push(x),
            _ => by_index.push((x.assistant_index, vec![x])),
        }
    }
    let mut applied = 0;
    for (idx, mut group) in by_index {
        group.reverse();
        let uses: Vec<ContentBlock> = group
            .iter()
            .map(|x| ContentBlock::tool_use(&x.tool_use_id, x.tool.name(), json!({"paths": x.paths})))
            .collect();
        let results: Vec<ContentBlock> = group
            .iter()
            .map(|x| ContentBlock::tool_result(&x.tool_use_id, &x.content, x.is_error))
            .collect();
        let assistant_at = if req.messages[idx].role == Role::Assistant {
            req.messages[idx].blocks.extend(uses);
            idx
        } else {
            req.messages.insert(idx, Message::new(Role::Assistant, uses));
            idx
        };
        match req.messages.get_mut(assistant_at + 1) {
            Some(next) if next.role == Role::User => {
                let rest = std::mem::take(&mut next.blocks);
                next.blocks = results.into_iter().chain(rest).collect();
            }
            _ => req.messages.insert(assistant_at + 1, Message::new(Role::User, results)),
        }
        applied += group.len();
    }
    applied
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Directive {
    Drop { block_id: String },
    Anchor { block_id: String },
    Summarize { block_id: String, text: String },
    Collapse { start: u32, end: u32, text: String },
}

impl Directive {
    pub fn block_id(&self) -> Option<&str> {
        match self {
            Directive::Drop { block_id } | Directive::Anchor { block_id } | Directive::Summarize { block_id, .. } => {
                Some(block_id)
            }
            Directive::Collapse { .. } => None,
        }
    }

    pub fn turn_range(&self) -> Option<(u32, u32)> {
        match self {
            Directive::Collapse { start, end, .. } => Some((*start, *end)),
            _ => None,
        }
    }

    pub fn kind_str(&self) -> &'static str {
        match self {
            Directive::Drop { .. } => "drop",
            Directive::Anchor { .. } => "anchor",
            Directive::Summarize { .. } => "summarize",
            Directive::Collapse { .. } => "collapse",
        }
    }
}

static DROP_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*drop:\s*block:(\S+)\s*$").expect("static regex"));
static ANCHOR_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*anchor:\s*block:(\S+)\s*$").expect("static regex"));
static SUMMARIZE_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"^\s*summarize:\s*block:(\S+)\s+"(.*)"\s*$"#).expect("static regex"));
static COLLAPSE_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"^\s*collapse:\s*turns\s+(\d+)\s*-\s*(\d+)\s+"(.*)"\s*$"#).expect("static regex"));
static KEYWORD_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(drop|anchor|summarize|collapse):").expect("static regex"));

fn unescape(s: &str) -> String {
    s.replace("\\\"", "\"").replace("\\n", "\n")
}

/// Directives in document order plus the lines that looked like directives
/// but did not parse.
pub fn parse_cleanup_tags_detailed(text: &str) -> (Vec<Directive>, Vec<String>) {
    let mut out = Vec::new();
    let mut rejected = Vec::new();
    for line in text.lines() {
        if !KEYWORD_RE.is_match(line) {
            continue;
        }
        let d = if let Some(c) = DROP_RE.captures(line) {
            Some(Directive::Drop { block_id: c[1].to_string() })
        } else if let Some(c) = ANCHOR_RE.captures(line) {
            Some(Directive::Anchor { block_id: c[1].to_string() })
        } else if let Some(c) = SUMMARIZE_RE.captures(line) {
            Some(Directive::Summarize {
                block_id: c[1].to_string(),
                text: unescape(&c[2]),
            })
        } else if let Some(c) = COLLAPSE_RE.captures(line) {
            match (c[1].parse::<u32>(), c[2].parse::<u32>()) {
                (Ok(start), Ok(end)) if start <= end => Some(Directive::Collapse {
                    start,
                    end,
                    text: unescape(&c[3]),
                }),
                _ => None,
            }
        } else {
            None
        };
        match d {
            Some(d) => out.push(d),
            None => {
                tracing::debug!(line, "ignoring malformed cleanup tag");
                rejected.push(line.to_string());
            }
        }
    }
    (out, rejected)
}

pub fn parse_cleanup_tags(text: &str) -> Vec<Directive> {
    parse_cleanup_tags_detailed(text).0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectiveOutcome {
    pub directive: Directive,
    pub blocks: Vec<String>,
    pub bytes_delta: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MutationReport {
    pub applied: Vec<DirectiveOutcome>,
    pub skipped: Vec<(Directive, String)>,
    pub bytes_delta: i64,
}

impl MutationReport {
    pub fn blocks_affected(&self) -> Vec<&str> {
        self.applied.iter().flat_map(|a| a.blocks.iter().map(String::as_str)).collect()
    }
}

/// Bytes a block currently occupies in forwarded requests.
fn footprint(state: &SessionState, i: usize) -> i64 {
    let b = &state.blocks[i];
    match b.status {
        BlockStatus::Resident | BlockStatus::Pinned => b.size_bytes as i64,
        BlockStatus::Summarized => b.summary.as_deref().map_or(0, str::len) as i64,
        BlockStatus::Evicted => state.eviction_for(&b.block_id).map_or(0, |r| handles::render_handle(r).len()) as i64,
        BlockStatus::Collapsed => 0,
    }
}

/// Apply a batch of directives in one pass. Works on a copy of the state
/// and commits only at the end, so either every valid directive lands or
/// none does. `req` supplies block bodies for the eviction cache.
pub fn apply_directives(
    directives: &[Directive],
    state: &mut SessionState,
    req: &Request,
    current_turn: u32,
    cfg: &PolicyConfig,
) -> MutationReport {
    let mut work = state.clone();
    let mut report = MutationReport::default();
    for d in directives {
        match apply_one(d, &mut work, req, current_turn, cfg) {
            Ok(outcome) => {
                report.bytes_delta += outcome.bytes_delta;
                report.applied.push(outcome);
            }
            Err(reason) => report.skipped.push((d.clone(), reason)),
        }
    }
    *state = work;
    report
}

fn apply_one(
    d: &Directive,
    st: &mut SessionState,
    req: &Request,
    current_turn: u32,
    cfg: &PolicyConfig,
) -> Result<DirectiveOutcome, String> {
    let lookup = |st: &SessionState, id: &str| st.block_index(id).ok_or_else(|| format!("unknown block {id}"));
    match d {
        Directive::Drop { block_id } => {
            let i = lookup(st, block_id)?;
            let b = &st.blocks[i];
            if b.kind != BlockKind::ToolResult {
                return Err("only tool results can be dropped".into());
            }
            if !b.status.is_resident() {
                return Err(format!("block {block_id} is not resident"));
            }
            if b.status == BlockStatus::Pinned {
                return Err(format!("block {block_id} is pinned"));
            }
            let category = policy::category_of(policy::classify(b.tool_name.as_deref().unwrap_or_default(), cfg))
                .unwrap_or(EvictionCategory::Gc);
            let body = req
                .messages
                .get(b.message_index)
                .and_then(|m| m.blocks.get(b.block_index))
                .map(ContentBlock::body)
                .unwrap_or_default();
            let before = footprint(st, i);
            let rec = st.record_eviction(i, category, &body, current_turn).map_err(|e| e.to_string())?;
            let delta = handles::render_handle(&rec).len() as i64 - before;
            Ok(DirectiveOutcome {
                directive: d.clone(),
                blocks: vec![block_id.clone()],
                bytes_delta: delta,
            })
        }
        Directive::Anchor { block_id } => {
            let i = lookup(st, block_id)?;
            if st.blocks[i].anchored {
                return Err(format!("block {block_id} already anchored"));
            }
            st.blocks[i].anchored = true;
            Ok(DirectiveOutcome {
                directive: d.clone(),
                blocks: vec![block_id.clone()],
                bytes_delta: 0,
            })
        }
        Directive::Summarize { block_id, text } => {
            let i = lookup(st, block_id)?;
            let b = &st.blocks[i];
            if !matches!(b.kind, BlockKind::ToolResult | BlockKind::Text) {
                return Err("only text and tool results can be summarized".into());
            }
            if !b.status.is_resident() {
                return Err(format!("block {block_id} is not resident"));
            }
            let before = footprint(st, i);
            let b = &mut st.blocks[i];
            b.status = BlockStatus::Summarized;
            b.summary = Some(text.clone());
            Ok(DirectiveOutcome {
                directive: d.clone(),
                blocks: vec![block_id.clone()],
                bytes_delta: text.len() as i64 - before,
            })
        }
        Directive::Collapse { start, end, text } => {
            if start > end {
                return Err("start after end".into());
            }
            if *end >= current_turn {
                return Err(format!("range {start}-{end} reaches the current turn {current_turn}"));
            }
            if st.collapses.iter().any(|c| c.start_turn <= *end && *start <= c.end_turn) {
                return Err("range overlaps an earlier collapse".into());
            }
            let has_turn = |t: u32| req.messages.iter().any(|m| m.user_turn_index == Some(t));
            if !has_turn(*start) || !has_turn(end + 1) {
                return Err(format!("turns {start}-{end} not present in the request"));
            }
            let idx: Vec<usize> = (0..st.blocks.len())
                .filter(|&i| (*start..=*end).contains(&st.blocks[i].turn))
                .collect();
            let before: i64 = idx.iter().map(|&i| footprint(st, i)).sum();
            let mut ids = Vec::new();
            for &i in &idx {
                st.blocks[i].status = BlockStatus::Collapsed;
                ids.push(st.blocks[i].block_id.clone());
            }
            st.collapses.push(CollapseRecord {
                start_turn: *start,
                end_turn: *end,
                summary: text.clone(),
                block_ids: ids.clone(),
            });
            Ok(DirectiveOutcome {
                directive: d.clone(),
                blocks: ids,
                bytes_delta: text.len() as i64 - before,
            })
        }
    }
}

/// Replace each recorded turn range by one text block holding its summary,
/// placed at the head of the first message after the range. Tool results
/// whose tool_use was removed go too.
pub fn apply_collapses(req: &mut Request, collapses: &[CollapseRecord]) -> usize {
    let mut ordered: Vec<&CollapseRecord> = collapses.iter().collect();
    ordered.sort_by_key(|c| std::cmp::Reverse(c.start_turn));
    let mut applied = 0;
    for c in ordered {
        let find = |t: u32| req.messages.iter().position(|m| m.user_turn_index == Some(t));
        let (Some(a), Some(b)) = (find(c.start_turn), find(c.end_turn + 1)) else {
            continue;
        };
        let removed: Vec<Message> = req.messages.drain(a..b).collect();
        let gone: HashSet<String> = removed
            .iter()
            .flat_map(|m| m.blocks.iter())
            .filter(|b| b.kind() == BlockKind::ToolUse)
            .filter_map(|b| b.tool_use_id().map(str::to_string))
            .collect();
        let next = &mut req.messages[a];
        next.blocks.retain(|b| {
            !(b.kind() == BlockKind::ToolResult && b.tool_use_id().is_some_and(|id| gone.contains(id)))
        });
        next.blocks.insert(0, ContentBlock::text(c.summary.clone()));
        applied += 1;
    }
    applied
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdvisoryEntry {
    pub block_id: String,
    pub tool_name: Option<String>,
    pub key_param: Option<String>,
    pub size_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Advisory {
    pub fill_percent: f64,
    pub estimated_tokens: u64,
    pub zone: PressureZone,
    pub largest_blocks: Vec<AdvisoryEntry>,
}

pub const OPERATIONS_HELP: &str = "\
Cleanup directives (one per line anywhere in your reply):
drop: block:<ID>
anchor: block:<ID>
summarize: block:<ID> \"<text>\"
collapse: turns <N>-<M> \"<text>\"
Tools: memory_release(paths) frees content now; memory_fault(paths) restores evicted content.";

pub fn build_advisory(state: &SessionState, zone: PressureZone, estimated_tokens: u64, cfg: &PolicyConfig) -> Option<Advisory> {
    if zone == PressureZone::Normal {
        return None;
    }
    let mut resident: Vec<&crate::pagestore::BlockMeta> =
        state.blocks.iter().filter(|b| b.status.is_resident()).collect();
    resident.sort_by_key(|b| std::cmp::Reverse(b.size_bytes));
    let largest_blocks = resident
        .into_iter()
        .take(5)
        .map(|b| AdvisoryEntry {
            block_id: b.block_id.clone(),
            tool_name: b.tool_name.clone(),
            key_param: b.key_param.clone(),
            size_bytes: b.size_bytes,
        })
        .collect();
    Some(Advisory {
        fill_percent: estimated_tokens as f64 * 100.0 / cfg.context_window_tokens.max(1) as f64,
        estimated_tokens,
        zone,
        largest_blocks,
    })
}

impl Advisory {
    pub fn render(&self, cfg: &PolicyConfig) -> String {
        let mut s = format!(
            "{ADVISORY_OPEN}\nContext fill: {:.1}% ({} of {} tokens, zone {}).\nLargest resident blocks:\n",
            self.fill_percent,
            handles::thousands(self.estimated_tokens),
            handles::thousands(cfg.context_window_tokens),
            self.zone.as_str()
        );
        for e in &self.largest_blocks {
            let what = match (&e.tool_name, &e.key_param) {
                (Some(t), Some(k)) => format!("{t} {}", handles::truncate_middle(k, 80)),
                (Some(t), None) => t.clone(),
                _ => "text".to_string(),
            };
            s.push_str(&format!("- block:{} {what} ({} bytes)\n", e.block_id, handles::thousands(e.size_bytes)));
        }
        s.push_str(OPERATIONS_HELP);
        s.push('\n');
        s.push_str(ADVISORY_CLOSE);
        s
    }
}

pub fn render_advisory(state: &SessionState, zone: PressureZone, estimated_tokens: u64, cfg: &PolicyConfig) -> Option<String> {
    build_advisory(state, zone, estimated_tokens, cfg).map(|a| a.render(cfg))
}

pub fn is_advisory(text: &str) -> bool {
    text.trim_start().starts_with(ADVISORY_OPEN)
}

/// Remove advisory blocks echoed back by the client. Returns how many.
pub fn strip_advisories(req: &mut Request) -> usize {
    let mut n = 0;
    for m in req.messages.iter_mut().filter(|m| m.role == Role::User) {
        let before = m.blocks.len();
        m.blocks.retain(|b| !(b.kind() == BlockKind::Text && is_advisory(&b.body())));
        n += before - m.blocks.len();
    }
    n
}

/// Append `text` to the newest message if it is a user message.
pub fn inject_advisory(req: &mut Request, text: &str) -> bool {
    match req.messages.last_mut() {
        Some(m) if m.role == Role::User => {
            m.blocks.push(ContentBlock::text(text));
            true
        }
        _ => false,
    }
}
