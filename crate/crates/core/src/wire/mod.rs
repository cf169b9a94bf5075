//! Messages-API request model.
//!
//! Only `tools` and `messages` are ever rewritten; every other top-level
//! field is kept as the exact bytes the client sent and written back in its
//! original position.

pub mod sse;

use std::fmt;

use serde::de::{Deserializer, MapAccess, Visitor};
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use serde_json::{Map, Value};

pub use sse::{reassemble, AssembledBlock, AssembledMessage, SseDecoder, StreamEvent};

/// A request body that could not be parsed. `offset` is a byte position in
/// the original document.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("request parse error at byte {offset}: {message}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

impl ParseError {
    fn from_json(raw: &[u8], err: &serde_json::Error) -> Self {
        ParseError {
            offset: byte_offset(raw, err.line(), err.column()),
            message: err.to_string(),
        }
    }

    fn structural(message: impl Into<String>) -> Self {
        ParseError {
            offset: 0,
            message: message.into(),
        }
    }
}

fn byte_offset(raw: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut current = 1;
    let mut start = 0;
    for (i, b) in raw.iter().enumerate() {
        if current == line {
            break;
        }
        if *b == b'\n' {
            current += 1;
            start = i + 1;
        }
    }
    (start + column.saturating_sub(1)).min(raw.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Text,
    ToolUse,
    ToolResult,
    /// Images, thinking blocks, documents: carried through, never paged.
    Other,
}

/// One element of a message's `content` array.
///
/// The block is stored as its JSON object so fields this crate does not
/// model (`cache_control`, citations, ...) survive a rewrite.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentBlock {
    kind: BlockKind,
    raw: Map<String, Value>,
}

impl ContentBlock {
    pub fn from_value(value: Value) -> Self {
        match value {
            Value::Object(raw) => {
                let kind = match raw.get("type").and_then(Value::as_str) {
                    Some("text") => BlockKind::Text,
                    Some("tool_use") => BlockKind::ToolUse,
                    Some("tool_result") => BlockKind::ToolResult,
                    _ => BlockKind::Other,
                };
                ContentBlock { kind, raw }
            }
            Value::String(s) => ContentBlock::text(s),
            other => {
                let mut raw = Map::new();
                raw.insert("type".into(), Value::String("unknown".into()));
                raw.insert("value".into(), other);
                ContentBlock {
                    kind: BlockKind::Other,
                    raw,
                }
            }
        }
    }

    pub fn text(text: impl Into<String>) -> Self {
        let mut raw = Map::new();
        raw.insert("type".into(), Value::String("text".into()));
        raw.insert("text".into(), Value::String(text.into()));
        ContentBlock {
            kind: BlockKind::Text,
            raw,
        }
    }

    pub fn tool_use(id: impl Into<String>, name: impl Into<String>, input: Value) -> Self {
        let mut raw = Map::new();
        raw.insert("type".into(), Value::String("tool_use".into()));
        raw.insert("id".into(), Value::String(id.into()));
        raw.insert("name".into(), Value::String(name.into()));
        raw.insert("input".into(), input);
        ContentBlock {
            kind: BlockKind::ToolUse,
            raw,
        }
    }

    pub fn tool_result(tool_use_id: impl Into<String>, content: impl Into<String>, is_error: bool) -> Self {
        let mut raw = Map::new();
        raw.insert("type".into(), Value::String("tool_result".into()));
        raw.insert("tool_use_id".into(), Value::String(tool_use_id.into()));
        raw.insert("content".into(), Value::String(content.into()));
        if is_error {
            raw.insert("is_error".into(), Value::Bool(true));
        }
        ContentBlock {
            kind: BlockKind::ToolResult,
            raw,
        }
    }

    pub fn kind(&self) -> BlockKind {
        self.kind
    }

    pub fn raw(&self) -> &Map<String, Value> {
        &self.raw
    }

    pub fn to_value(&self) -> Value {
        Value::Object(self.raw.clone())
    }

    /// Tool name for `tool_use` blocks. Results carry no name on the wire;
    /// resolve them through [`Request::tool_use_index`].
    pub fn tool_name(&self) -> Option<&str> {
        match self.kind {
            BlockKind::ToolUse => self.raw.get("name").and_then(Value::as_str),
            _ => None,
        }
    }

    /// `id` of a tool_use, or `tool_use_id` of a tool_result.
    pub fn tool_use_id(&self) -> Option<&str> {
        match self.kind {
            BlockKind::ToolUse => self.raw.get("id").and_then(Value::as_str),
            BlockKind::ToolResult => self.raw.get("tool_use_id").and_then(Value::as_str),
            _ => None,
        }
    }

    pub fn args(&self) -> Option<&Value> {
        match self.kind {
            BlockKind::ToolUse => self.raw.get("input"),
            _ => None,
        }
    }

    pub fn is_error(&self) -> bool {
        self.kind == BlockKind::ToolResult
            && self.raw.get("is_error").and_then(Value::as_bool).unwrap_or(false)
    }

    /// The payload whose size and hash identify the block.
    ///
    /// Text blocks: the text. Tool results: the concatenated text parts of
    /// `content` (non-text parts contribute their JSON). Tool uses: the
    /// serialized input.
    pub fn body(&self) -> String {
        match self.kind {
            BlockKind::Text => self
                .raw
                .get("text")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string(),
            BlockKind::ToolResult => match self.raw.get("content") {
                None | Some(Value::Null) => String::new(),
                Some(Value::String(s)) => s.clone(),
                Some(Value::Array(parts)) => {
                    let mut out = String::new();
                    for part in parts {
                        if part.get("type").and_then(Value::as_str) == Some("text") {
                            out.push_str(part.get("text").and_then(Value::as_str).unwrap_or_default());
                        } else {
                            out.push_str(&part.to_string());
                        }
                    }
                    out
                }
                Some(other) => other.to_string(),
            },
            BlockKind::ToolUse => self.raw.get("input").map(Value::to_string).unwrap_or_default(),
            BlockKind::Other => Value::Object(self.raw.clone()).to_string(),
        }
    }

    pub fn content_bytes(&self) -> usize {
        self.body().len()
    }

    /// Replace the block's payload with `text`, keeping its identity fields
    /// (`tool_use_id`, `is_error`, `cache_control`).
    pub fn replace_body(&mut self, text: impl Into<String>) {
        let text = text.into();
        match self.kind {
            BlockKind::ToolResult => {
                self.raw.insert("content".into(), Value::String(text));
            }
            BlockKind::Text => {
                self.raw.insert("text".into(), Value::String(text));
            }
            BlockKind::ToolUse | BlockKind::Other => {
                // Structural blocks cannot take a text body; degrade to text.
                let cache_control = self.raw.get("cache_control").cloned();
                *self = ContentBlock::text(text);
                if let Some(cc) = cache_control {
                    self.raw.insert("cache_control".into(), cc);
                }
            }
        }
    }
}

impl Serialize for ContentBlock {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.raw.serialize(serializer)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub role: Role,
    pub blocks: Vec<ContentBlock>,
    /// Set by [`index_turns`] on messages that open a user turn.
    pub user_turn_index: Option<u32>,
    /// The enclosing or most recent preceding user turn (0 before the first).
    pub turn: u32,
    string_content: bool,
    /// Every other field of the message object, in original order.
    /// `content` is re-inserted at `content_pos` on serialization.
    extra: Vec<(String, Value)>,
    content_pos: usize,
}

impl Message {
    pub fn new(role: Role, blocks: Vec<ContentBlock>) -> Self {
        Message {
            role,
            blocks,
            user_turn_index: None,
            turn: 0,
            string_content: false,
            extra: vec![("role".into(), Value::String(role.as_str().into()))],
            content_pos: 1,
        }
    }

    fn from_value(value: Value, index: usize) -> Result<Self, ParseError> {
        let Value::Object(map) = value else {
            return Err(ParseError::structural(format!("messages[{index}] is not an object")));
        };
        let role = match map.get("role").and_then(Value::as_str) {
            Some("user") => Role::User,
            Some("assistant") => Role::Assistant,
            other => {
                return Err(ParseError::structural(format!(
                    "messages[{index}] has unsupported role {other:?}"
                )))
            }
        };
        let mut extra = Vec::with_capacity(map.len());
        let mut content_pos = None;
        let mut blocks = Vec::new();
        let mut string_content = false;
        for (k, v) in map {
            if k == "content" {
                content_pos = Some(extra.len());
                match v {
                    Value::String(s) => {
                        string_content = true;
                        blocks.push(ContentBlock::text(s));
                    }
                    Value::Array(items) => blocks.extend(items.into_iter().map(ContentBlock::from_value)),
                    Value::Null => {}
                    other => blocks.push(ContentBlock::from_value(other)),
                }
            } else {
                extra.push((k, v));
            }
        }
        let content_pos = content_pos.unwrap_or(extra.len());
        Ok(Message {
            role,
            blocks,
            user_turn_index: None,
            turn: 0,
            string_content,
            extra,
            content_pos,
        })
    }

    /// True when every block is a tool_result (agent clients deliver tool
    /// output as user-role messages; these do not open a turn).
    pub fn is_tool_result_only(&self) -> bool {
        !self.blocks.is_empty() && self.blocks.iter().all(|b| b.kind() == BlockKind::ToolResult)
    }

    pub fn counts_as_user_turn(&self) -> bool {
        self.role == Role::User && self.blocks.iter().any(|b| b.kind() != BlockKind::ToolResult)
    }

    pub fn text(&self) -> String {
        self.blocks
            .iter()
            .filter(|b| b.kind() == BlockKind::Text)
            .map(ContentBlock::body)
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn content_value(&self) -> Value {
        if self.string_content && self.blocks.len() == 1 && self.blocks[0].kind() == BlockKind::Text {
            let b = &self.blocks[0];
            if b.raw.len() == 2 {
                return Value::String(b.body());
            }
        }
        Value::Array(self.blocks.iter().map(ContentBlock::to_value).collect())
    }
}

impl Serialize for Message {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.extra.len() + 1))?;
        for (i, (k, v)) in self.extra.iter().enumerate() {
            if i == self.content_pos {
                map.serialize_entry("content", &self.content_value())?;
            }
            map.serialize_entry(k, v)?;
        }
        if self.content_pos >= self.extra.len() {
            map.serialize_entry("content", &self.content_value())?;
        }
        map.end()
    }
}

/// A tool definition as sent in the request's `tools` array.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolDef {
    raw: Map<String, Value>,
}

impl ToolDef {
    pub fn from_value(value: Value) -> Self {
        match value {
            Value::Object(raw) => ToolDef { raw },
            other => {
                let mut raw = Map::new();
                raw.insert("value".into(), other);
                ToolDef { raw }
            }
        }
    }

    pub fn new(name: &str, description: &str, input_schema: Value) -> Self {
        let mut raw = Map::new();
        raw.insert("name".into(), Value::String(name.into()));
        raw.insert("description".into(), Value::String(description.into()));
        raw.insert("input_schema".into(), input_schema);
        ToolDef { raw }
    }

    pub fn name(&self) -> &str {
        self.raw.get("name").and_then(Value::as_str).unwrap_or_default()
    }

    pub fn description(&self) -> &str {
        self.raw.get("description").and_then(Value::as_str).unwrap_or_default()
    }

    pub fn input_schema(&self) -> Option<&Value> {
        self.raw.get("input_schema")
    }

    pub fn raw_field(&self, key: &str) -> Option<&Value> {
        self.raw.get(key)
    }

    pub fn with_field(mut self, key: &str, value: Value) -> Self {
        self.raw.insert(key.into(), value);
        self
    }

    /// Length of the compact serialization.
    pub fn byte_size(&self) -> usize {
        serde_json::to_vec(&self.raw).map(|v| v.len()).unwrap_or(0)
    }
}

impl Serialize for ToolDef {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.raw.serialize(serializer)
    }
}

/// Top-level entries in document order, values as raw bytes.
struct OrderedRaw(Vec<(String, Box<RawValue>)>);

impl<'de> Deserialize<'de> for OrderedRaw {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = OrderedRaw;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<OrderedRaw, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = access.next_entry::<String, Box<RawValue>>()? {
                    out.push((k, v));
                }
                Ok(OrderedRaw(out))
            }
        }
        deserializer.deserialize_map(V)
    }
}

#[derive(Debug, Clone)]
enum Entry {
    Tools,
    Messages,
    Raw(Box<RawValue>),
}

/// A parsed Messages-API request.
#[derive(Debug, Clone)]
pub struct Request {
    pub model_name: Option<String>,
    /// Text of each system-prompt segment (read-only view; the field itself
    /// is forwarded as received).
    pub system_prompt: Vec<String>,
    pub tools: Vec<ToolDef>,
    pub messages: Vec<Message>,
    stream: bool,
    entries: Vec<(String, Entry)>,
}

impl PartialEq for Request {
    fn eq(&self, other: &Self) -> bool {
        self.model_name == other.model_name
            && self.system_prompt == other.system_prompt
            && self.tools == other.tools
            && self.messages == other.messages
            && self.stream == other.stream
            && self.passthrough_fields() == other.passthrough_fields()
    }
}

pub fn parse_request(raw: &[u8]) -> Result<Request, ParseError> {
    let ordered: OrderedRaw = serde_json::from_slice(raw).map_err(|e| ParseError::from_json(raw, &e))?;
    let mut req = Request {
        model_name: None,
        system_prompt: Vec::new(),
        tools: Vec::new(),
        messages: Vec::new(),
        stream: false,
        entries: Vec::with_capacity(ordered.0.len()),
    };
    let value_of = |rv: &RawValue| -> Result<Value, ParseError> {
        serde_json::from_str(rv.get()).map_err(|e| ParseError::structural(e.to_string()))
    };
    for (key, rv) in ordered.0 {
        match key.as_str() {
            "messages" => {
                let Value::Array(items) = value_of(&rv)? else {
                    return Err(ParseError::structural("messages is not an array"));
                };
                req.messages = items
                    .into_iter()
                    .enumerate()
                    .map(|(i, v)| Message::from_value(v, i))
                    .collect::<Result<_, _>>()?;
                req.entries.push((key, Entry::Messages));
            }
            "tools" => {
                let Value::Array(items) = value_of(&rv)? else {
                    return Err(ParseError::structural("tools is not an array"));
                };
                req.tools = items.into_iter().map(ToolDef::from_value).collect();
                req.entries.push((key, Entry::Tools));
            }
            _ => {
                match key.as_str() {
                    "model" => req.model_name = value_of(&rv)?.as_str().map(str::to_string),
                    "stream" => req.stream = value_of(&rv)?.as_bool().unwrap_or(false),
                    "system" => req.system_prompt = system_segments(&value_of(&rv)?),
                    _ => {}
                }
                req.entries.push((key, Entry::Raw(rv)));
            }
        }
    }
    if !req.entries.iter().any(|(k, _)| k == "messages") {
        return Err(ParseError::structural("request has no messages field"));
    }
    Ok(req)
}

fn system_segments(value: &Value) -> Vec<String> {
    match value {
        Value::String(s) => vec![s.clone()],
        Value::Array(items) => items
            .iter()
            .map(|item| match item.get("text").and_then(Value::as_str) {
                Some(t) => t.to_string(),
                None => item.to_string(),
            })
            .collect(),
        Value::Null => Vec::new(),
        other => vec![other.to_string()],
    }
}

impl Request {
    pub fn new(model: &str, messages: Vec<Message>) -> Self {
        Request {
            model_name: Some(model.to_string()),
            system_prompt: Vec::new(),
            tools: Vec::new(),
            messages,
            stream: false,
            entries: vec![
                ("model".into(), Entry::Raw(raw_value(&Value::String(model.into())))),
                ("messages".into(), Entry::Messages),
            ],
        }
    }

    pub fn is_stream(&self) -> bool {
        self.stream
    }

    /// Top-level fields this crate never rewrites, as received.
    pub fn passthrough_fields(&self) -> Vec<(&str, &str)> {
        self.entries
            .iter()
            .filter_map(|(k, e)| match e {
                Entry::Raw(rv) => Some((k.as_str(), rv.get())),
                _ => None,
            })
            .collect()
    }

    pub fn passthrough(&self, key: &str) -> Option<&str> {
        self.entries.iter().find_map(|(k, e)| match e {
            Entry::Raw(rv) if k == key => Some(rv.get()),
            _ => None,
        })
    }

    /// Make sure a `tools` entry is emitted even if the client sent none.
    pub fn ensure_tools_field(&mut self) {
        if !self.entries.iter().any(|(k, _)| k == "tools") {
            self.entries.push(("tools".into(), Entry::Tools));
        }
    }

    /// Map from tool_use id to (tool name, input) over the whole history.
    pub fn tool_use_index(&self) -> std::collections::HashMap<String, (String, Value)> {
        let mut out = std::collections::HashMap::new();
        for m in &self.messages {
            for b in &m.blocks {
                if b.kind() == BlockKind::ToolUse {
                    if let (Some(id), Some(name)) = (b.tool_use_id(), b.tool_name()) {
                        out.insert(id.to_string(), (name.to_string(), b.args().cloned().unwrap_or(Value::Null)));
                    }
                }
            }
        }
        out
    }

    pub fn max_user_turn(&self) -> Option<u32> {
        self.messages.iter().filter_map(|m| m.user_turn_index).max()
    }

    /// Compact serialization. Passthrough fields are emitted byte-for-byte.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(1024);
        out.push(b'{');
        let mut tools_written = false;
        for (i, (key, entry)) in self.entries.iter().enumerate() {
            if i > 0 {
                out.push(b',');
            }
            // Keys are plain strings; serializing cannot fail.
            out.extend(serde_json::to_vec(key).unwrap_or_default());
            out.push(b':');
            match entry {
                Entry::Raw(rv) => out.extend_from_slice(rv.get().as_bytes()),
                Entry::Tools => {
                    tools_written = true;
                    out.extend(serde_json::to_vec(&self.tools).unwrap_or_default());
                }
                Entry::Messages => out.extend(serde_json::to_vec(&self.messages).unwrap_or_default()),
            }
        }
        if !tools_written && !self.tools.is_empty() {
            out.extend_from_slice(b",\"tools\":");
            out.extend(serde_json::to_vec(&self.tools).unwrap_or_default());
        }
        out.push(b'}');
        out
    }
}

pub fn serialize_request(req: &Request) -> Vec<u8> {
    req.serialize()
}

fn raw_value(v: &Value) -> Box<RawValue> {
    RawValue::from_string(v.to_string()).expect("serde_json output is valid JSON")
}

/// Assign user-turn indices and each message's effective turn.
///
/// A message opens a turn iff it is user-role and carries at least one
/// block that is not a tool_result. Returns the newest turn index, if any.
pub fn index_turns(req: &mut Request) -> Option<u32> {
    let mut next = 0u32;
    let mut current: Option<u32> = None;
    for m in &mut req.messages {
        if m.counts_as_user_turn() {
            m.user_turn_index = Some(next);
            current = Some(next);
            next += 1;
        } else {
            m.user_turn_index = None;
        }
        m.turn = current.unwrap_or(0);
    }
    current
}

/// Age of a block at `turn` relative to the newest user turn.
pub fn age(max_turn: u32, turn: u32) -> u32 {
    max_turn.saturating_sub(turn)
}
