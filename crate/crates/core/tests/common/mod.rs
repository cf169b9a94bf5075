//! Shared test scaffolding: a scriptable mock upstream, the scripted agent
//! session, and reference implementations used as oracles.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::convert::Infallible;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Router;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tokio::sync::oneshot;

use pichay::analytics::{EventKind, ReplayEvent, Transcript};
use pichay::pagestore::FaultHistory;
use pichay::policy::{select_evictions, PolicyConfig};
use pichay::proxy::server::{spawn, RunningServer};
use pichay::proxy::{Engine, FaultInjection, Mode, ProxyConfig};
use pichay::wire::sse::{concat_raw, parse_events, synth};
use pichay::wire::{reassemble, BlockKind, Role, StreamEvent};
use pichay::{BlockMeta, BlockStatus, ContentHash, EvictionCategory, FaultKey, PressureZone, SessionState};

pub fn fixture(name: &str) -> Vec<u8> {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

pub fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

// ---------------------------------------------------------------- mock upstream

pub enum MockReply {
    Json(Value),
    Sse(Vec<StreamEvent>),
}

pub type Script = Arc<dyn Fn(&[u8]) -> MockReply + Send + Sync>;

struct MockState {
    received: Mutex<Vec<Vec<u8>>>,
    script: Script,
}

pub struct Mock {
    pub url: String,
    received: Arc<MockState>,
    stop: Option<oneshot::Sender<()>>,
}

impl Mock {
    pub fn received(&self) -> Vec<Vec<u8>> {
        self.received.received.lock().unwrap().clone()
    }

    pub fn stop(mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
    }
}

pub fn input_tokens(body_len: usize) -> u64 {
    (body_len as f64 / 4.15).round() as u64
}

fn message_start(input_tokens: u64) -> StreamEvent {
    StreamEvent::new(
        "message_start",
        &json!({"type": "message_start", "message": {"id": "msg_mock", "type": "message", "role": "assistant",
            "model": "mock", "content": [], "stop_reason": null,
            "usage": {"input_tokens": input_tokens, "output_tokens": 1}}}),
    )
}

/// Hashes the body it was sent; stream or not, as the request asks.
pub fn echo_script() -> Script {
    Arc::new(|body: &[u8]| {
        let text = sha_hex(body);
        let stream = serde_json::from_slice::<Value>(body)
            .ok()
            .and_then(|v| v.get("stream").and_then(Value::as_bool))
            .unwrap_or(false);
        if stream {
            let mut ev = vec![message_start(input_tokens(body.len()))];
            ev.extend(synth::text_block(0, &text));
            ev.extend(synth::finish("end_turn"));
            MockReply::Sse(ev)
        } else {
            MockReply::Json(json!({
                "id": "msg_mock", "type": "message", "role": "assistant", "model": "mock",
                "content": [{"type": "text", "text": text}],
                "stop_reason": "end_turn",
                "usage": {"input_tokens": input_tokens(body.len()), "output_tokens": 1}
            }))
        }
    })
}

async fn mock_handler(State(s): State<Arc<MockState>>, body: Bytes) -> Response {
    s.received.lock().unwrap().push(body.to_vec());
    match (s.script)(&body) {
        MockReply::Json(v) => (
            StatusCode::OK,
            [(header::CONTENT_TYPE, "application/json")],
            serde_json::to_vec(&v).unwrap(),
        )
            .into_response(),
        MockReply::Sse(events) => {
            // Small uneven chunks so event boundaries straddle reads.
            let raw = concat_raw(&events).into_bytes();
            let chunks: Vec<Result<Bytes, Infallible>> =
                raw.chunks(37).map(|c| Ok(Bytes::copy_from_slice(c))).collect();
            Response::builder()
                .status(StatusCode::OK)
                .header(header::CONTENT_TYPE, "text/event-stream")
                .body(Body::from_stream(futures::stream::iter(chunks)))
                .unwrap()
        }
    }
}

pub async fn start_mock(script: Script) -> Mock {
    let state = Arc::new(MockState {
        received: Mutex::new(Vec::new()),
        script,
    });
    let app = Router::new().fallback(mock_handler).with_state(state.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = oneshot::channel::<()>();
    tokio::spawn(async move {
        let _ = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await;
    });
    Mock {
        url: format!("http://{addr}"),
        received: state,
        stop: Some(tx),
    }
}

pub async fn start_proxy(mut cfg: ProxyConfig, upstream: &str, fault: Option<FaultInjection>) -> RunningServer {
    cfg.listen_address = "127.0.0.1:0".into();
    cfg.upstream_base_url = upstream.to_string();
    let mut engine = Engine::new(cfg);
    if let Some(f) = fault {
        engine = engine.with_fault(f);
    }
    spawn(engine).await.expect("proxy starts")
}

pub async fn post(client: &reqwest::Client, base: &str, session: &str, body: Vec<u8>) -> (u16, Vec<u8>) {
    let r = client
        .post(format!("{base}/v1/messages"))
        .header("content-type", "application/json")
        .header("x-session-id", session)
        .body(body)
        .send()
        .await
        .expect("proxy reachable");
    let status = r.status().as_u16();
    (status, r.bytes().await.unwrap().to_vec())
}

/// Request bodies covering the shapes a client sends.
pub fn transparency_corpus() -> Vec<(String, Vec<u8>)> {
    let tools: Value = serde_json::from_slice(&fixture("tools_18.json")).unwrap();
    let tools_req = json!({"model": "m", "max_tokens": 64, "tools": tools, "messages": [
        {"role": "user", "content": "list the repo"},
        {"role": "assistant", "content": [{"type": "tool_use", "id": "t1", "name": "Bash", "input": {"command": "ls"}}]},
        {"role": "user", "content": [{"type": "tool_result", "tool_use_id": "t1", "content": "a\nb\n"}]}
    ]});
    let session = pichay::analytics::synth::session_a();
    let sa = json!({"model": "m", "max_tokens": 64, "stream": true, "messages": session.messages()});
    vec![
        ("skills_triplicated".into(), fixture("skills_triplicated.json")),
        ("tools_18".into(), serde_json::to_vec(&tools_req).unwrap()),
        ("session_a".into(), serde_json::to_vec(&sa).unwrap()),
        (
            "odd_whitespace".into(),
            r#"{ "model" : "m",  "messages":[ {"role":"user","content":"h\u00e9llo é"} ],"metadata":{"user_id":"u"} ,"temperature":0.50}"#
                .as_bytes()
                .to_vec(),
        ),
        ("not_json".into(), b"this is not json {".to_vec()),
    ]
}

// ------------------------------------------------------------ scripted session

pub const SCRIPT_STEPS: usize = 12;

pub fn script_file(i: usize) -> String {
    format!("MARKER-{i}\n{}", pichay::analytics::synth::body_for(&format!("/proj/file_{i}.py"), 6_000))
}

fn step_of(req: &Value) -> Option<(usize, bool)> {
    let last = req["messages"].as_array()?.last()?;
    let content = last["content"].as_array().cloned().unwrap_or_else(|| vec![json!({"type": "text", "text": last["content"]})]);
    let text = content
        .iter()
        .filter(|b| b["type"] == "text")
        .filter_map(|b| b["text"].as_str())
        .find_map(|t| t.strip_prefix("step "))
        .and_then(|n| n.trim().parse().ok());
    match text {
        Some(n) => Some((n, true)),
        None => Some((0, false)),
    }
}

/// The "model": reads files 0-8, re-reads file 1, restores file 2 through
/// the phantom fault tool, then checks the restored content arrived.
pub fn agent_script() -> Script {
    Arc::new(|body: &[u8]| {
        let req: Value = serde_json::from_slice(body).unwrap_or(Value::Null);
        let tokens = input_tokens(body.len());
        let mut ev = vec![message_start(tokens)];
        match step_of(&req) {
            Some((n, true)) if n <= 9 => {
                let file = if n == 9 { 1 } else { n };
                ev.extend(synth::tool_block(
                    0,
                    &format!("toolu_{n}"),
                    "Read",
                    &json!({"file_path": format!("/proj/file_{file}.py")}),
                ));
                ev.extend(synth::finish("tool_use"));
            }
            Some((10, true)) => {
                ev.extend(synth::text_block(0, "I need file 2 again."));
                ev.extend(synth::tool_block(1, "toolu_10", "memory_fault", &json!({"paths": ["/proj/file_2.py"]})));
                ev.extend(synth::finish("tool_use"));
            }
            Some((_, true)) => {
                let text = if String::from_utf8_lossy(body).contains("MARKER-2") {
                    "task complete: MARKER-2 verified"
                } else {
                    "task failed: MARKER-2 missing"
                };
                ev.extend(synth::text_block(0, text));
                ev.extend(synth::finish("end_turn"));
            }
            _ => {
                ev.extend(synth::text_block(0, "noted"));
                ev.extend(synth::finish("end_turn"));
            }
        }
        MockReply::Sse(ev)
    })
}

pub fn script_policy() -> PolicyConfig {
    PolicyConfig {
        advisory_tokens: 3_000,
        involuntary_tokens: 6_000,
        aggressive_tokens: 60_000,
        context_window_tokens: 100_000,
        ..Default::default()
    }
}

#[derive(Debug, Default)]
pub struct ScriptOutcome {
    pub requests: usize,
    pub client_bytes: u64,
    pub upstream_bytes: u64,
    pub final_text: String,
    /// Tool uses the client saw that it does not implement.
    pub leaked_tools: Vec<String>,
    pub stop_reasons: Vec<String>,
    pub log_path: PathBuf,
}

/// Drive the twelve-step session through a proxy in `mode`.
pub async fn scripted_session(mode: Mode, dir: &Path) -> ScriptOutcome {
    let mock = start_mock(agent_script()).await;
    let log_path = dir.join(format!("decisions-{}.jsonl", mode.as_str()));
    let cfg = ProxyConfig {
        mode,
        log_path: Some(log_path.clone()),
        checkpoint_dir: Some(dir.join("ckpt")),
        policy: script_policy(),
        ..Default::default()
    };
    let proxy = start_proxy(cfg, &mock.url, None).await;
    let client = reqwest::Client::new();
    let mut out = ScriptOutcome {
        log_path,
        ..Default::default()
    };
    let mut messages: Vec<Value> = Vec::new();
    // A realistic client payload: every request carries the full tool list.
    let tools: Value = serde_json::from_slice(&fixture("tools_18.json")).unwrap();
    for step in 0..SCRIPT_STEPS {
        messages.push(json!({"role": "user", "content": [{"type": "text", "text": format!("step {step}")}]}));
        loop {
            let body = serde_json::to_vec(&json!({
                "model": "mock", "max_tokens": 256, "stream": true, "tools": tools, "messages": messages
            }))
            .unwrap();
            out.client_bytes += body.len() as u64;
            out.requests += 1;
            let (status, bytes) = post(&client, &proxy.url(), "scripted", body).await;
            assert_eq!(status, 200, "{}", String::from_utf8_lossy(&bytes));
            let msg = reassemble(&parse_events(&bytes)).expect("well-formed stream");
            let stop = msg.stop_reason.clone().unwrap_or_default();
            out.stop_reasons.push(stop.clone());
            let mut content = Vec::new();
            let mut results = Vec::new();
            for b in &msg.blocks {
                match b.kind.as_str() {
                    "text" => {
                        out.final_text = b.text.clone();
                        content.push(json!({"type": "text", "text": b.text}));
                    }
                    "tool_use" => {
                        let id = b.id.clone().unwrap_or_default();
                        let name = b.name.clone().unwrap_or_default();
                        content.push(json!({"type": "tool_use", "id": id, "name": name, "input": b.input}));
                        if name == "Read" {
                            let path = b.input["file_path"].as_str().unwrap_or_default();
                            let i: usize = path.trim_start_matches("/proj/file_").trim_end_matches(".py").parse().unwrap();
                            results.push(json!({"type": "tool_result", "tool_use_id": id, "content": script_file(i)}));
                        } else {
                            out.leaked_tools.push(name);
                        }
                    }
                    _ => {}
                }
            }
            messages.push(json!({"role": "assistant", "content": content}));
            if stop == "tool_use" && !results.is_empty() {
                messages.push(json!({"role": "user", "content": results}));
                continue;
            }
            break;
        }
    }
    out.upstream_bytes = mock.received().iter().map(|b| b.len() as u64).sum();
    proxy.stop().await;
    mock.stop();
    out
}

// ------------------------------------------------------ reference automaton

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PinOp {
    Evict,
    FaultSame,
    FaultDiff,
    EditRead,
}

pub const PIN_OPS: [PinOp; 4] = [PinOp::Evict, PinOp::FaultSame, PinOp::FaultDiff, PinOp::EditRead];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefStatus {
    Resident,
    Evicted,
    Pinned,
}

/// Hand-written model of the pin rules over one file.
#[derive(Debug, Clone, Default)]
pub struct RefPins {
    pub version: u32,
    pub blocks: Vec<(u32, RefStatus)>,
    /// Content version of the newest unanswered paged eviction.
    pub pending: Option<u32>,
    pub pinned: Option<u32>,
    pub faults: u32,
}

impl RefPins {
    pub fn new() -> Self {
        let mut r = RefPins::default();
        r.read();
        r
    }

    pub fn apply(&mut self, op: PinOp) {
        match op {
            PinOp::Evict => {
                for b in self.blocks.iter_mut().filter(|b| b.1 == RefStatus::Resident) {
                    b.1 = RefStatus::Evicted;
                    self.pending = Some(b.0);
                }
            }
            PinOp::FaultSame => self.read(),
            PinOp::FaultDiff | PinOp::EditRead => {
                self.version += 1;
                self.read();
            }
        }
    }

    fn read(&mut self) {
        let h = self.version;
        if let Some(evicted) = self.pending.take() {
            self.faults += 1;
            if h == evicted {
                self.pinned = Some(h);
            } else if self.pinned.is_some_and(|p| p != h) {
                self.pinned = None;
            }
        } else if self.pinned.is_some_and(|p| p != h) {
            self.pinned = None;
        }
        self.blocks.push((h, RefStatus::Resident));
        for b in self.blocks.iter_mut().filter(|b| b.1 != RefStatus::Evicted) {
            b.1 = if Some(b.0) == self.pinned { RefStatus::Pinned } else { RefStatus::Resident };
        }
    }
}

/// The library's page store driven through the same operations.
pub struct StorePins {
    pub state: SessionState,
    pub cfg: PolicyConfig,
    pub version: u32,
    pub turn: u32,
    key: FaultKey,
}

fn version_body(v: u32) -> String {
    format!("contents v{v}\n{}", "x".repeat(2_000))
}

impl StorePins {
    pub fn new() -> Self {
        let mut s = StorePins {
            state: SessionState::new("pins"),
            cfg: PolicyConfig::default(),
            version: 0,
            turn: 0,
            key: FaultKey::new("Read", "/a.py"),
        };
        s.read();
        s
    }

    pub fn apply(&mut self, op: PinOp) {
        match op {
            PinOp::Evict => {
                self.turn += 10;
                let picked = select_evictions(
                    &self.state.blocks,
                    &self.state.fault_history,
                    PressureZone::Involuntary,
                    self.turn,
                    &self.cfg,
                );
                for c in picked {
                    let body = version_body(0);
                    self.state
                        .record_eviction(c.index, c.category, &body, self.turn)
                        .expect("candidates are evictable");
                }
            }
            PinOp::FaultSame => self.read(),
            PinOp::FaultDiff | PinOp::EditRead => {
                self.version += 1;
                self.read();
            }
        }
    }

    fn read(&mut self) {
        self.turn += 1;
        let body = version_body(self.version);
        let hash = ContentHash::of(body.as_bytes());
        self.state.observe_access(&self.key, hash, self.turn);
        let n = self.state.blocks.len();
        self.state.blocks.push(BlockMeta {
            block_id: format!("{}-{}", hash.short(), self.turn),
            content_hash: hash,
            size_bytes: body.len() as u64,
            line_count: Some(2),
            turn: self.turn,
            role: Role::User,
            kind: BlockKind::ToolResult,
            tool_name: Some("Read".into()),
            status: BlockStatus::Resident,
            summary: None,
            fault_key: Some(self.key.clone()),
            key_param: Some("/a.py".into()),
            is_error: false,
            anchored: false,
            released: false,
            message_index: n,
            block_index: 0,
        });
        self.state.refresh_pins();
    }

    pub fn statuses(&self) -> Vec<RefStatus> {
        self.state
            .blocks
            .iter()
            .map(|b| match b.status {
                BlockStatus::Resident => RefStatus::Resident,
                BlockStatus::Pinned => RefStatus::Pinned,
                _ => RefStatus::Evicted,
            })
            .collect()
    }

    pub fn faults(&self) -> u32 {
        self.state.fault_history.get(&self.key).map(|e| e.fault_count).unwrap_or(0)
    }

    pub fn pinned(&self) -> bool {
        self.state.fault_history.get(&self.key).is_some_and(|e| e.pinned)
    }
}

pub fn all_sequences(max_len: usize) -> Vec<Vec<PinOp>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for op in PIN_OPS {
                let mut t: Vec<PinOp> = s.clone();
                t.push(op);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// First divergence between the store and the reference, if any.
pub fn pin_divergence(seq: &[PinOp]) -> Option<String> {
    let mut r = RefPins::new();
    let mut s = StorePins::new();
    for (i, &op) in seq.iter().enumerate() {
        r.apply(op);
        s.apply(op);
        let want: Vec<RefStatus> = r.blocks.iter().map(|b| b.1).collect();
        if s.statuses() != want || s.faults() != r.faults || s.pinned() != r.pinned.is_some() {
            return Some(format!(
                "{seq:?} step {i}: store {:?} faults={} pinned={} / reference {want:?} faults={} pinned={:?}",
                s.statuses(),
                s.faults(),
                s.pinned(),
                r.faults,
                r.pinned
            ));
        }
    }
    None
}

// ----------------------------------------------------------- replay oracle

fn sorted_json(v: &Value) -> Value {
    match v {
        Value::Object(m) => {
            let b: BTreeMap<String, Value> = m.iter().map(|(k, v)| (k.clone(), sorted_json(v))).collect();
            Value::Object(b.into_iter().collect())
        }
        Value::Array(a) => Value::Array(a.iter().map(sorted_json).collect()),
        o => o.clone(),
    }
}

/// `(step, tool, key)` of every successful tool result, where step is the
/// index of the carrying user message among all user messages.
pub fn requests_of(t: &Transcript) -> Vec<(usize, String, String)> {
    let mut calls: HashMap<String, (String, String)> = HashMap::new();
    let mut out = Vec::new();
    let mut user_idx = 0usize;
    for m in t.messages() {
        for b in &m.blocks {
            let v = b.to_value();
            match v["type"].as_str() {
                Some("tool_use") => {
                    let name = v["name"].as_str().unwrap_or_default().to_string();
                    let key = match (name.as_str(), v["input"]["file_path"].as_str()) {
                        ("Read", Some(p)) => p.to_string(),
                        _ => sorted_json(&v["input"]).to_string(),
                    };
                    calls.insert(v["id"].as_str().unwrap_or_default().to_string(), (name, key));
                }
                Some("tool_result") if m.role == Role::User => {
                    if v["is_error"].as_bool() == Some(true) {
                        continue;
                    }
                    if let Some((n, k)) = v["tool_use_id"].as_str().and_then(|id| calls.get(id)) {
                        out.push((user_idx, n.clone(), k.clone()));
                    }
                }
                _ => {}
            }
        }
        if m.role == Role::User {
            user_idx += 1;
        }
    }
    out
}

/// Brute force over every (request, earlier request-or-eviction) pair: a
/// request faults iff the newest earlier event on its key is a paged
/// eviction. Within one step requests precede evictions.
pub fn oracle_faults(transcripts: &[Transcript], events: &[ReplayEvent]) -> u64 {
    let mut faults = 0;
    for t in transcripts {
        let reqs = requests_of(t);
        let evs: Vec<(usize, String, String, EvictionCategory)> = events
            .iter()
            .filter(|e| e.session == t.session_id)
            .filter_map(|e| match e.kind {
                EventKind::Evicted(c) => Some((e.step, e.key.tool_name.clone(), e.key.args_key.clone(), c)),
                EventKind::Fault => None,
            })
            .collect();
        for (ri, (rs, rn, rk)) in reqs.iter().enumerate() {
            // Position 2*step for requests, 2*step+1 for evictions.
            let pos = 2 * rs;
            let mut newest: Option<(usize, bool)> = None; // (position, is_paged_eviction)
            for (oi, (os, on, ok)) in reqs.iter().enumerate() {
                if oi != ri && on == rn && ok == rk && (2 * os < pos || (2 * os == pos && oi < ri)) {
                    let p = 2 * os;
                    if newest.is_none_or(|(q, _)| p >= q) {
                        newest = Some((p, false));
                    }
                }
            }
            for (es, en, ek, c) in &evs {
                let p = 2 * es + 1;
                if en == rn && ek == rk && p < pos && newest.is_none_or(|(q, _)| p > q) {
                    newest = Some((p, *c == EvictionCategory::Paged));
                }
            }
            if newest.is_some_and(|(_, paged)| paged) {
                faults += 1;
            }
        }
    }
    faults
}

// ---------------------------------------------------------- generators

/// Arbitrary tool-result metadata for property tests.
pub fn arb_block(
    turn: u32,
    size: u64,
    tool: usize,
    status: usize,
    is_error: bool,
    anchored: bool,
    released: bool,
) -> BlockMeta {
    let tools = ["Read", "Bash", "Grep", "WebFetch", "NotebookRead", "Edit"];
    let statuses = [BlockStatus::Resident, BlockStatus::Pinned, BlockStatus::Evicted, BlockStatus::Summarized];
    let name = tools[tool % tools.len()];
    let key = FaultKey::new(name, &format!("/f/{}", turn % 7));
    BlockMeta {
        block_id: format!("b{turn}-{size}"),
        content_hash: ContentHash::of(format!("{turn}:{size}").as_bytes()),
        size_bytes: size,
        line_count: None,
        turn,
        role: Role::User,
        kind: BlockKind::ToolResult,
        tool_name: Some(name.to_string()),
        status: statuses[status % statuses.len()],
        summary: None,
        fault_key: Some(key),
        key_param: None,
        is_error,
        anchored,
        released,
        message_index: 0,
        block_index: 0,
    }
}

pub fn empty_history() -> FaultHistory {
    FaultHistory::default()
}
