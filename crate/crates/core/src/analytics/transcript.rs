//! Session transcripts and the probe measurements over them.
//!
//! Three line formats are accepted, detected per line:
//!
//! - agent session logs: `{"type": "user" | "assistant", "message": {...}}`
//! - bare messages: `{"role": ..., "content": ...}`
//! - request captures: `{"session_id": ..., "request": {"messages": [...]}}`
//!   or a bare request object with a `messages` array
//!
//! Captures hold the whole history per line; the longest request of each
//! session is its transcript, and earlier requests reveal which results the
//! proxy had already replaced by handles.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::handles::is_handle;
use crate::wire::{BlockKind, ContentBlock, Message, Role};

#[derive(Debug, thiserror::Error)]
pub enum TranscriptError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptRecord {
    pub role: Role,
    pub blocks: Vec<ContentBlock>,
    pub usage: Option<Map<String, Value>>,
}

impl TranscriptRecord {
    pub fn new(role: Role, blocks: Vec<ContentBlock>) -> Self {
        TranscriptRecord { role, blocks, usage: None }
    }

    pub fn from_message(v: &Value) -> Option<Self> {
        let role = match v.get("role")?.as_str()? {
            "user" => Role::User,
            "assistant" => Role::Assistant,
            _ => return None,
        };
        let blocks = match v.get("content") {
            Some(Value::String(s)) => vec![ContentBlock::text(s.clone())],
            Some(Value::Array(items)) => items.iter().cloned().map(ContentBlock::from_value).collect(),
            _ => Vec::new(),
        };
        Some(TranscriptRecord {
            role,
            blocks,
            usage: v.get("usage").and_then(Value::as_object).cloned(),
        })
    }

    pub fn to_message(&self) -> Message {
        Message::new(self.role, self.blocks.clone())
    }

    pub fn opens_user_turn(&self) -> bool {
        self.role == Role::User && self.blocks.iter().any(|b| b.kind() != BlockKind::ToolResult)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcript {
    pub session_id: String,
    pub records: Vec<TranscriptRecord>,
    /// For captures: tool_use id → user turn at which its result was first
    /// seen as a handle.
    pub handle_turns: HashMap<String, u32>,
}

impl Transcript {
    pub fn new(session_id: impl Into<String>, records: Vec<TranscriptRecord>) -> Self {
        Transcript {
            session_id: session_id.into(),
            records,
            handle_turns: HashMap::new(),
        }
    }

    pub fn messages(&self) -> Vec<Message> {
        self.records.iter().map(TranscriptRecord::to_message).collect()
    }

    /// User turn of each record (0 before the first turn opens).
    pub fn record_turns(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.records.len());
        let mut next = 0u32;
        let mut cur = None;
        for r in &self.records {
            if r.opens_user_turn() {
                cur = Some(next);
                next += 1;
            }
            out.push(cur.unwrap_or(0));
        }
        out
    }

    pub fn user_turns(&self) -> u32 {
        self.records.iter().filter(|r| r.opens_user_turn()).count() as u32
    }

    pub fn total_bytes(&self) -> u64 {
        self.records
            .iter()
            .flat_map(|r| &r.blocks)
            .map(|b| b.content_bytes() as u64)
            .sum()
    }
}

enum Line {
    Record(String, TranscriptRecord),
    Capture(String, Vec<Value>),
    Skip,
}

fn classify_line(v: &Value) -> Line {
    if let Some(req) = v.get("request").filter(|r| r.get("messages").is_some()) {
        let sid = v.get("session_id").and_then(Value::as_str).unwrap_or("capture").to_string();
        let msgs = req["messages"].as_array().cloned().unwrap_or_default();
        return Line::Capture(sid, msgs);
    }
    if let Some(Value::Array(msgs)) = v.get("messages") {
        return Line::Capture("capture".into(), msgs.clone());
    }
    if let Some(t) = v.get("type").and_then(Value::as_str) {
        if t != "user" && t != "assistant" {
            return Line::Skip;
        }
        let sid = v
            .get("sessionId")
            .or_else(|| v.get("session_id"))
            .and_then(Value::as_str)
            .unwrap_or("session")
            .to_string();
        let Some(msg) = v.get("message") else { return Line::Skip };
        let mut rec = match TranscriptRecord::from_message(msg) {
            Some(r) => r,
            None => return Line::Skip,
        };
        if rec.usage.is_none() {
            rec.usage = v.get("usage").and_then(Value::as_object).cloned();
        }
        return Line::Record(sid, rec);
    }
    match TranscriptRecord::from_message(v) {
        Some(r) => Line::Record("session".into(), r),
        None => Line::Skip,
    }
}

/// Turn at which each tool result first appears as a handle, over a series
/// of captured requests.
fn handle_turns(requests: &[Vec<Value>]) -> HashMap<String, u32> {
    let mut out = HashMap::new();
    for msgs in requests {
        let t = Transcript::new("", msgs.iter().filter_map(TranscriptRecord::from_message).collect());
        let last_turn = t.user_turns().saturating_sub(1);
        for r in &t.records {
            for b in &r.blocks {
                if b.kind() == BlockKind::ToolResult && is_handle(&b.body()) {
                    if let Some(id) = b.tool_use_id() {
                        out.entry(id.to_string()).or_insert(last_turn);
                    }
                }
            }
        }
    }
    out
}

/// Parse JSONL text into transcripts, one per session id, in order of
/// first appearance. Malformed lines are skipped.
pub fn parse_jsonl(text: &str) -> Vec<Transcript> {
    parse_lines(text.lines().map(|l| Ok::<_, std::io::Error>(l.to_string()))).unwrap_or_default()
}

fn parse_lines<E>(lines: impl Iterator<Item = Result<String, E>>) -> Result<Vec<Transcript>, E> {
    let mut order: Vec<String> = Vec::new();
    let mut records: BTreeMap<String, Vec<TranscriptRecord>> = BTreeMap::new();
    let mut captures: BTreeMap<String, Vec<Vec<Value>>> = BTreeMap::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let Ok(v) = serde_json::from_str::<Value>(&line) else {
            tracing::debug!("skipping malformed transcript line");
            continue;
        };
        match classify_line(&v) {
            Line::Record(sid, r) => {
                if !order.contains(&sid) {
                    order.push(sid.clone());
                }
                records.entry(sid).or_default().push(r);
            }
            Line::Capture(sid, msgs) => {
                if !order.contains(&sid) {
                    order.push(sid.clone());
                }
                captures.entry(sid).or_default().push(msgs);
            }
            Line::Skip => {}
        }
    }
    let mut out = Vec::new();
    for sid in order {
        if let Some(reqs) = captures.remove(&sid) {
            let longest = reqs.iter().max_by_key(|m| m.len()).cloned().unwrap_or_default();
            let mut t = Transcript::new(
                sid.clone(),
                longest.iter().filter_map(TranscriptRecord::from_message).collect(),
            );
            t.handle_turns = handle_turns(&reqs);
            out.push(t);
        } else if let Some(recs) = records.remove(&sid) {
            out.push(Transcript::new(sid, recs));
        }
    }
    Ok(out)
}

pub fn load_file(path: &Path) -> Result<Vec<Transcript>, TranscriptError> {
    let io = |source| TranscriptError::Io {
        path: path.to_path_buf(),
        source,
    };
    let f = std::fs::File::open(path).map_err(io)?;
    let mut ts = parse_lines(BufReader::new(f).lines()).map_err(io)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("session");
    for t in &mut ts {
        if t.session_id == "session" || t.session_id == "capture" {
            t.session_id = stem.to_string();
        }
    }
    Ok(ts)
}

/// Every `.jsonl` file under `path` (or `path` itself), sorted.
pub fn collect_files(path: &Path) -> Vec<PathBuf> {
    if path.is_file() {
        return vec![path.to_path_buf()];
    }
    let mut out = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(rd) = std::fs::read_dir(&dir) else { continue };
        for e in rd.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "jsonl") {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

/// Size-weighted mean number of later user turns each tool result rides
/// along for, counted to the end of the session. 0 with no tool results.
pub fn amplification_factor(t: &Transcript) -> f64 {
    amplification(t, false)
}

/// As [`amplification_factor`], but a result stops counting once the
/// proxy was seen replacing it with a handle.
pub fn amplification_factor_managed(t: &Transcript) -> f64 {
    amplification(t, true)
}

fn amplification(t: &Transcript, cutoff: bool) -> f64 {
    let turns = t.record_turns();
    let total_turns = t.user_turns();
    let mut weighted = 0f64;
    let mut total = 0f64;
    for (r, &turn) in t.records.iter().zip(&turns) {
        for b in r.blocks.iter().filter(|b| b.kind() == BlockKind::ToolResult) {
            let size = b.content_bytes() as f64;
            // Turns opened after this one.
            let mut survived = total_turns.saturating_sub(turn + 1);
            if cutoff {
                if let Some(&h) = b.tool_use_id().and_then(|id| t.handle_turns.get(id)) {
                    survived = survived.min(h.saturating_sub(turn));
                }
            }
            weighted += size * survived as f64;
            total += size;
        }
    }
    if total == 0.0 {
        0.0
    } else {
        weighted / total
    }
}

/// Byte shares of a transcript by origin.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    pub tool_result: f64,
    pub assistant: f64,
    pub user_text: f64,
    pub tool_result_bytes: u64,
    pub assistant_bytes: u64,
    pub user_text_bytes: u64,
}

pub fn tool_overhead(t: &Transcript) -> Overhead {
    let mut o = Overhead::default();
    for r in &t.records {
        for b in &r.blocks {
            let n = b.content_bytes() as u64;
            match (b.kind(), r.role) {
                (BlockKind::ToolResult, _) => o.tool_result_bytes += n,
                (_, Role::Assistant) => o.assistant_bytes += n,
                (_, Role::User) => o.user_text_bytes += n,
            }
        }
    }
    let total = (o.tool_result_bytes + o.assistant_bytes + o.user_text_bytes) as f64;
    if total > 0.0 {
        o.tool_result = o.tool_result_bytes as f64 / total;
        o.assistant = o.assistant_bytes as f64 / total;
        o.user_text = o.user_text_bytes as f64 / total;
    }
    o
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub session_id: String,
    pub records: usize,
    pub user_turns: u32,
    pub tool_results: usize,
    pub total_bytes: u64,
    pub amplification_factor: f64,
    /// Only for captures where handles were observed.
    pub amplification_factor_managed: Option<f64>,
    pub overhead: Overhead,
    pub tool_result_bytes_by_tool: BTreeMap<String, u64>,
    pub last_usage_input_tokens: Option<u64>,
}

pub fn probe(t: &Transcript) -> ProbeReport {
    let mut names: HashMap<String, String> = HashMap::new();
    for r in &t.records {
        for b in &r.blocks {
            if let (BlockKind::ToolUse, Some(id), Some(n)) = (b.kind(), b.tool_use_id(), b.tool_name()) {
                names.insert(id.to_string(), n.to_string());
            }
        }
    }
    let mut by_tool: BTreeMap<String, u64> = BTreeMap::new();
    let mut tool_results = 0;
    for b in t.records.iter().flat_map(|r| &r.blocks) {
        if b.kind() == BlockKind::ToolResult {
            tool_results += 1;
            let name = b
                .tool_use_id()
                .and_then(|id| names.get(id))
                .cloned()
                .unwrap_or_else(|| "unknown".into());
            *by_tool.entry(name).or_default() += b.content_bytes() as u64;
        }
    }
    let last_usage = t
        .records
        .iter()
        .rev()
        .find_map(|r| r.usage.as_ref().and_then(crate::cooperative::effective_input_tokens));
    ProbeReport {
        session_id: t.session_id.clone(),
        records: t.records.len(),
        user_turns: t.user_turns(),
        tool_results,
        total_bytes: t.total_bytes(),
        amplification_factor: amplification_factor(t),
        amplification_factor_managed: (!t.handle_turns.is_empty()).then(|| amplification_factor_managed(t)),
        overhead: tool_overhead(t),
        tool_result_bytes_by_tool: by_tool,
        last_usage_input_tokens: last_usage,
    }
}
