//! Server-sent-event framing for streamed Messages responses.

use serde_json::{Map, Value};

/// One SSE event, retaining its exact framing bytes in `raw` so that an
/// untouched event can be re-emitted byte for byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamEvent {
    pub raw: String,
    pub event: Option<String>,
    pub data: String,
}

impl StreamEvent {
    pub fn parse(raw: String) -> Self {
        let mut event = None;
        let mut data_lines: Vec<&str> = Vec::new();
        for line in raw.split(['\n', '\r']) {
            if line.is_empty() || line.starts_with(':') {
                continue;
            }
            let (field, value) = match line.find(':') {
                Some(pos) => {
                    let v = &line[pos + 1..];
                    (&line[..pos], v.strip_prefix(' ').unwrap_or(v))
                }
                None => (line, ""),
            };
            match field {
                "event" => event = Some(value.to_string()),
                "data" => data_lines.push(value),
                _ => {}
            }
        }
        let data = data_lines.join("\n");
        StreamEvent { raw, event, data }
    }

    /// Build an event in the canonical `event:`/`data:` framing.
    pub fn new(event: &str, data: &Value) -> Self {
        let data = data.to_string();
        StreamEvent {
            raw: format!("event: {event}\ndata: {data}\n\n"),
            event: Some(event.to_string()),
            data,
        }
    }

    pub fn json(&self) -> Option<Value> {
        serde_json::from_str(&self.data).ok()
    }

    /// The `type` of the payload, falling back to the `event:` field.
    pub fn kind(&self) -> Option<String> {
        self.json()
            .and_then(|v| v.get("type").and_then(Value::as_str).map(str::to_string))
            .or_else(|| self.event.clone())
    }

    /// Same event name and framing, new payload.
    pub fn with_data(&self, data: &Value) -> Self {
        StreamEvent::new(self.event.as_deref().unwrap_or("message"), data)
    }
}

/// Incremental splitter: feed arbitrary byte chunks, get complete events.
#[derive(Debug, Default)]
pub struct SseDecoder {
    buf: Vec<u8>,
}

impl SseDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, chunk: &[u8]) -> Vec<StreamEvent> {
        self.buf.extend_from_slice(chunk);
        let mut out = Vec::new();
        while let Some(end) = frame_end(&self.buf) {
            let frame: Vec<u8> = self.buf.drain(..end).collect();
            out.push(StreamEvent::parse(String::from_utf8_lossy(&frame).into_owned()));
        }
        out
    }

    /// Whatever is left once the upstream closes (an unterminated event).
    pub fn finish(&mut self) -> Option<StreamEvent> {
        if self.buf.is_empty() {
            return None;
        }
        let rest = std::mem::take(&mut self.buf);
        Some(StreamEvent::parse(String::from_utf8_lossy(&rest).into_owned()))
    }

    pub fn has_partial(&self) -> bool {
        !self.buf.is_empty()
    }
}

/// End offset (exclusive) of the first complete frame, blank line included.
fn frame_end(buf: &[u8]) -> Option<usize> {
    let mut i = 0;
    while i + 1 < buf.len() {
        match (buf[i], buf[i + 1]) {
            (b'\n', b'\n') => return Some(i + 2),
            (b'\r', b'\r') => return Some(i + 2),
            (b'\r', b'\n') if i + 3 < buf.len() && buf[i + 2] == b'\r' && buf[i + 3] == b'\n' => {
                return Some(i + 4)
            }
            _ => i += 1,
        }
    }
    None
}

pub fn parse_events(bytes: &[u8]) -> Vec<StreamEvent> {
    let mut dec = SseDecoder::new();
    let mut events = dec.push(bytes);
    events.extend(dec.finish());
    events
}

pub fn concat_raw(events: &[StreamEvent]) -> String {
    events.iter().map(|e| e.raw.as_str()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledBlock {
    pub kind: String,
    pub text: String,
    pub id: Option<String>,
    pub name: Option<String>,
    pub input: Value,
}

/// The logical response a stream describes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AssembledMessage {
    pub id: Option<String>,
    pub model: Option<String>,
    pub blocks: Vec<AssembledBlock>,
    pub stop_reason: Option<String>,
    pub usage: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StreamError {
    #[error("event {0} carries no JSON payload")]
    BadPayload(usize),
    #[error("event {0} arrives before message_start")]
    NoMessage(usize),
    #[error("event {0} references unknown block index {1}")]
    BadIndex(usize, u64),
    #[error("tool input for block {0} is not valid JSON")]
    BadToolInput(u64),
}

/// Fold a stream into the response it describes.
pub fn reassemble(events: &[StreamEvent]) -> Result<AssembledMessage, StreamError> {
    let mut msg: Option<AssembledMessage> = None;
    let mut partial_json: Vec<String> = Vec::new();
    for (i, ev) in events.iter().enumerate() {
        if ev.data.is_empty() && ev.event.is_none() {
            continue;
        }
        let Some(v) = ev.json() else {
            if ev.event.as_deref() == Some("ping") {
                continue;
            }
            return Err(StreamError::BadPayload(i));
        };
        let kind = v.get("type").and_then(Value::as_str).unwrap_or_default();
        match kind {
            "message_start" => {
                let m = v.get("message").cloned().unwrap_or(Value::Null);
                msg = Some(AssembledMessage {
                    id: m.get("id").and_then(Value::as_str).map(str::to_string),
                    model: m.get("model").and_then(Value::as_str).map(str::to_string),
                    blocks: Vec::new(),
                    stop_reason: None,
                    usage: m.get("usage").and_then(Value::as_object).cloned().unwrap_or_default(),
                });
            }
            "content_block_start" => {
                let m = msg.as_mut().ok_or(StreamError::NoMessage(i))?;
                let index = v.get("index").and_then(Value::as_u64).unwrap_or(u64::MAX);
                if index as usize != m.blocks.len() {
                    return Err(StreamError::BadIndex(i, index));
                }
                let cb = v.get("content_block").cloned().unwrap_or(Value::Null);
                m.blocks.push(AssembledBlock {
                    kind: cb.get("type").and_then(Value::as_str).unwrap_or("unknown").to_string(),
                    text: cb.get("text").and_then(Value::as_str).unwrap_or_default().to_string(),
                    id: cb.get("id").and_then(Value::as_str).map(str::to_string),
                    name: cb.get("name").and_then(Value::as_str).map(str::to_string),
                    input: cb.get("input").cloned().unwrap_or(Value::Null),
                });
                partial_json.push(String::new());
            }
            "content_block_delta" => {
                let m = msg.as_mut().ok_or(StreamError::NoMessage(i))?;
                let index = v.get("index").and_then(Value::as_u64).unwrap_or(u64::MAX);
                let block = m.blocks.get_mut(index as usize).ok_or(StreamError::BadIndex(i, index))?;
                let delta = v.get("delta").cloned().unwrap_or(Value::Null);
                match delta.get("type").and_then(Value::as_str) {
                    Some("text_delta") => block.text.push_str(delta.get("text").and_then(Value::as_str).unwrap_or_default()),
                    Some("input_json_delta") => partial_json[index as usize]
                        .push_str(delta.get("partial_json").and_then(Value::as_str).unwrap_or_default()),
                    Some("thinking_delta") => block
                        .text
                        .push_str(delta.get("thinking").and_then(Value::as_str).unwrap_or_default()),
                    _ => {}
                }
            }
            "content_block_stop" => {
                let m = msg.as_ref().ok_or(StreamError::NoMessage(i))?;
                let index = v.get("index").and_then(Value::as_u64).unwrap_or(u64::MAX);
                if index as usize >= m.blocks.len() {
                    return Err(StreamError::BadIndex(i, index));
                }
            }
            "message_delta" => {
                let m = msg.as_mut().ok_or(StreamError::NoMessage(i))?;
                if let Some(r) = v.pointer("/delta/stop_reason").and_then(Value::as_str) {
                    m.stop_reason = Some(r.to_string());
                }
                if let Some(u) = v.get("usage").and_then(Value::as_object) {
                    for (k, val) in u {
                        m.usage.insert(k.clone(), val.clone());
                    }
                }
            }
            _ => {}
        }
    }
    let mut m = msg.unwrap_or_default();
    for (i, pj) in partial_json.into_iter().enumerate() {
        if m.blocks[i].kind == "tool_use" && !pj.is_empty() {
            m.blocks[i].input = serde_json::from_str(&pj).map_err(|_| StreamError::BadToolInput(i as u64))?;
        }
    }
    Ok(m)
}

/// Builders for synthetic streams: tests, examples and mock upstreams.
pub mod synth {
    use super::*;
    use serde_json::json;

    pub fn message_start() -> StreamEvent {
        StreamEvent::new(
            "message_start",
            &json!({"type": "message_start", "message": {"id": "msg_1", "type": "message", "role": "assistant",
                "model": "m", "content": [], "stop_reason": null,
                "usage": {"input_tokens": 1200, "cache_read_input_tokens": 300, "output_tokens": 1}}}),
        )
    }

    pub fn text_block(index: u64, text: &str) -> Vec<StreamEvent> {
        let (a, b) = text.split_at(text.len() / 2);
        vec![
            StreamEvent::new("content_block_start", &json!({"type": "content_block_start", "index": index, "content_block": {"type": "text", "text": ""}})),
            StreamEvent::new("content_block_delta", &json!({"type": "content_block_delta", "index": index, "delta": {"type": "text_delta", "text": a}})),
            StreamEvent::new("content_block_delta", &json!({"type": "content_block_delta", "index": index, "delta": {"type": "text_delta", "text": b}})),
            StreamEvent::new("content_block_stop", &json!({"type": "content_block_stop", "index": index})),
        ]
    }

    pub fn tool_block(index: u64, id: &str, name: &str, input: &Value) -> Vec<StreamEvent> {
        let s = input.to_string();
        let (a, b) = s.split_at(s.len() / 2);
        vec![
            StreamEvent::new("content_block_start", &json!({"type": "content_block_start", "index": index, "content_block": {"type": "tool_use", "id": id, "name": name, "input": {}}})),
            StreamEvent::new("content_block_delta", &json!({"type": "content_block_delta", "index": index, "delta": {"type": "input_json_delta", "partial_json": a}})),
            StreamEvent::new("content_block_delta", &json!({"type": "content_block_delta", "index": index, "delta": {"type": "input_json_delta", "partial_json": b}})),
            StreamEvent::new("content_block_stop", &json!({"type": "content_block_stop", "index": index})),
        ]
    }

    pub fn finish(stop_reason: &str) -> Vec<StreamEvent> {
        vec![
            StreamEvent::new("message_delta", &json!({"type": "message_delta", "delta": {"stop_reason": stop_reason, "stop_sequence": null}, "usage": {"output_tokens": 42}})),
            StreamEvent::new("message_stop", &json!({"type": "message_stop"})),
        ]
    }
}
