//! Per-session page table.
//!
//! The client resends its full, unmodified history on every request, so
//! nothing here stores message content except the bounded cache of evicted
//! bodies used to answer `memory_fault`. Decisions are keyed by block id
//! and re-applied to each incoming request.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use sha2::{Digest, Sha256};
use tracing::warn;

use crate::cooperative::{PendingInjection, PhantomExchange};
use crate::policy::{self, PolicyConfig, ToolClass};
use crate::trimming::StubState;
use crate::wire::{BlockKind, Request, Role};

/// Bodies cached for `memory_fault`, per session. Metadata is never dropped.
pub const CONTENT_CACHE_BUDGET: usize = 64 * 1024 * 1024;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ContentHash(pub [u8; 32]);

impl ContentHash {
    pub fn of(bytes: &[u8]) -> Self {
        ContentHash(Sha256::digest(bytes).into())
    }

    pub fn hex(&self) -> String {
        hex::encode(self.0)
    }

    /// First 8 hex digits.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({})", self.short())
    }
}

impl Serialize for ContentHash {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.hex())
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("content hash must be 32 bytes"))?;
        Ok(ContentHash(arr))
    }
}

/// Identity of a tool call for fault matching: same tool, same arguments.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FaultKey {
    pub tool_name: String,
    pub args_key: String,
}

impl FaultKey {
    pub fn new(tool_name: &str, args_key: &str) -> Self {
        FaultKey {
            tool_name: tool_name.to_string(),
            args_key: args_key.to_string(),
        }
    }

    /// Pageable tools are keyed by the path they read; everything else by
    /// the sorted-key serialization of its arguments.
    pub fn from_args(tool_name: &str, args: &Value, cfg: &PolicyConfig) -> Self {
        if policy::classify(tool_name, cfg) == ToolClass::Pageable {
            for k in ["file_path", "notebook_path", "path"] {
                if let Some(p) = args.get(k).and_then(Value::as_str) {
                    return FaultKey::new(tool_name, p);
                }
            }
        }
        FaultKey::new(tool_name, &canonical_json(args))
    }
}

impl fmt::Display for FaultKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.tool_name, self.args_key)
    }
}

/// Compact JSON with object keys sorted at every depth.
pub fn canonical_json(v: &Value) -> String {
    fn sorted(v: &Value) -> Value {
        match v {
            Value::Object(m) => {
                let ordered: BTreeMap<_, _> = m.iter().map(|(k, v)| (k.clone(), sorted(v))).collect();
                Value::Object(ordered.into_iter().collect())
            }
            Value::Array(a) => Value::Array(a.iter().map(sorted).collect()),
            other => other.clone(),
        }
    }
    sorted(v).to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockStatus {
    Resident,
    Evicted,
    Summarized,
    Collapsed,
    Pinned,
}

impl BlockStatus {
    pub fn is_resident(self) -> bool {
        matches!(self, BlockStatus::Resident | BlockStatus::Pinned)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMeta {
    /// `<first 8 hex of content hash>-<turn>`, with `.N` appended for the
    /// N-th repeat of identical content within one turn.
    pub block_id: String,
    pub content_hash: ContentHash,
    pub size_bytes: u64,
    pub line_count: Option<u64>,
    pub turn: u32,
    pub role: Role,
    pub kind: BlockKind,
    pub tool_name: Option<String>,
    pub status: BlockStatus,
    pub summary: Option<String>,
    pub fault_key: Option<FaultKey>,
    pub key_param: Option<String>,
    pub is_error: bool,
    pub anchored: bool,
    /// Released by the model through `memory_release`.
    pub released: bool,
    /// Position in the most recent request (after advisory stripping).
    pub message_index: usize,
    pub block_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvictionCategory {
    Gc,
    Paged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvictionRecord {
    pub block_id: String,
    pub fault_key: FaultKey,
    pub key_param: String,
    pub content_hash: ContentHash,
    pub size_bytes: u64,
    pub line_count: Option<u64>,
    pub evicted_at_turn: u32,
    pub category: EvictionCategory,
    /// A fault has already been counted against this eviction.
    #[serde(default)]
    pub resolved: bool,
    #[serde(skip)]
    pub cached_body: Option<Arc<str>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultEntry {
    pub fault_key: FaultKey,
    pub pinned_hash: ContentHash,
    pub fault_count: u32,
    pub last_access_turn: u32,
    pub pinned: bool,
}

/// Pin table. Serialized as a list of entries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FaultHistory {
    entries: BTreeMap<FaultKey, FaultEntry>,
}

impl FaultHistory {
    pub fn get(&self, key: &FaultKey) -> Option<&FaultEntry> {
        self.entries.get(key)
    }

    pub fn get_mut(&mut self, key: &FaultKey) -> Option<&mut FaultEntry> {
        self.entries.get_mut(key)
    }

    pub fn insert(&mut self, entry: FaultEntry) {
        self.entries.insert(entry.fault_key.clone(), entry);
    }

    pub fn iter(&self) -> impl Iterator<Item = &FaultEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_pinned(&self, key: &FaultKey, hash: &ContentHash) -> bool {
        self.entries.get(key).is_some_and(|e| e.pinned && e.pinned_hash == *hash)
    }
}

impl Serialize for FaultHistory {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.entries.values())
    }
}

impl<'de> Deserialize<'de> for FaultHistory {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let list = Vec::<FaultEntry>::deserialize(d)?;
        let mut h = FaultHistory::default();
        for e in list {
            h.insert(e);
        }
        Ok(h)
    }
}

/// A model-authored collapse of an inclusive user-turn range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseRecord {
    pub start_turn: u32,
    pub end_turn: u32,
    pub summary: String,
    pub block_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PageStoreError {
    #[error("block {0} is pinned and cannot be evicted")]
    EvictPinned(String),
    #[error("block {0} is not resident")]
    NotResident(String),
    #[error("no block at index {0}")]
    NoSuchBlock(usize),
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O failed for {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("session has no checkpoint path")]
    NoPath,
    #[error("checkpoint encoding failed: {0}")]
    Encode(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Default)]
pub struct SessionState {
    pub session_id: String,
    pub blocks: Vec<BlockMeta>,
    pub evictions: Vec<EvictionRecord>,
    pub fault_history: FaultHistory,
    pub collapses: Vec<CollapseRecord>,
    pub stubs: StubState,
    pub pending_phantom_results: Vec<PendingInjection>,
    pub phantom_exchanges: Vec<PhantomExchange>,
    pub checkpoint_path: Option<PathBuf>,
    /// System-prompt segment hashes from the previous request.
    pub static_hashes: Vec<String>,
    /// Effective input tokens reported by the previous upstream response.
    pub last_usage_tokens: Option<u64>,
    /// Hash of the assistant message whose cleanup tags were last applied.
    pub last_directive_source: Option<String>,
    /// Message count of the previous request.
    pub last_message_count: usize,
    pub cache_budget_bytes: usize,
    cache_bytes: usize,
}

/// Result of registering one request.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registration {
    /// Indices into `SessionState::blocks` of blocks never seen before.
    pub new_blocks: Vec<usize>,
    pub max_turn: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PinUpdate {
    pub pinned: bool,
    pub fault_count: u32,
}

/// What a new tool result means for the pin table.
#[derive(Debug, Clone, PartialEq)]
pub enum Access {
    /// Re-request of evicted content.
    Fault { record: usize, update: PinUpdate },
    /// Pinned key re-read with different content.
    Unpinned,
    PinnedHit,
    Plain,
}

impl SessionState {
    pub fn new(session_id: impl Into<String>) -> Self {
        SessionState {
            session_id: session_id.into(),
            cache_budget_bytes: CONTENT_CACHE_BUDGET,
            ..Default::default()
        }
    }

    pub fn with_checkpoint(mut self, path: PathBuf) -> Self {
        self.checkpoint_path = Some(path);
        self
    }

    pub fn used_tools(&self) -> &BTreeSet<String> {
        &self.stubs.used_tools
    }

    pub fn cached_bytes(&self) -> usize {
        self.cache_bytes
    }

    pub fn block(&self, block_id: &str) -> Option<&BlockMeta> {
        self.blocks.iter().find(|b| b.block_id == block_id)
    }

    pub fn block_index(&self, block_id: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.block_id == block_id)
    }

    pub fn eviction_for(&self, block_id: &str) -> Option<&EvictionRecord> {
        self.evictions.iter().rev().find(|r| r.block_id == block_id)
    }

    /// Rebuild the block list from a turn-indexed request, carrying over
    /// the status of every block id seen before.
    pub fn register_blocks(&mut self, req: &Request, cfg: &PolicyConfig) -> Registration {
        let tool_uses = req.tool_use_index();
        let prior: HashMap<String, BlockMeta> =
            std::mem::take(&mut self.blocks).into_iter().map(|b| (b.block_id.clone(), b)).collect();
        let evicted: BTreeSet<&str> = self.evictions.iter().map(|r| r.block_id.as_str()).collect();
        let collapsed: BTreeSet<&str> = self
            .collapses
            .iter()
            .flat_map(|c| c.block_ids.iter().map(String::as_str))
            .collect();
        let mut repeats: HashMap<String, u32> = HashMap::new();
        let mut reg = Registration {
            max_turn: req.max_user_turn().unwrap_or(0),
            ..Default::default()
        };
        let mut blocks = Vec::new();
        for (mi, m) in req.messages.iter().enumerate() {
            for (bi, b) in m.blocks.iter().enumerate() {
                let body = b.body();
                let content_hash = ContentHash::of(body.as_bytes());
                let base = format!("{}-{}", content_hash.short(), m.turn);
                let n = repeats.entry(base.clone()).or_insert(0);
                let block_id = if *n == 0 { base } else { format!("{base}.{n}") };
                *n += 1;
                let (tool_name, args) = match b.kind() {
                    BlockKind::ToolUse => (b.tool_name().map(str::to_string), b.args().cloned()),
                    BlockKind::ToolResult => match b.tool_use_id().and_then(|id| tool_uses.get(id)) {
                        Some((name, args)) => (Some(name.clone()), Some(args.clone())),
                        None => (None, None),
                    },
                    _ => (None, None),
                };
                let fault_key = match (&tool_name, &args) {
                    (Some(t), Some(a)) => Some(FaultKey::from_args(t, a, cfg)),
                    _ => None,
                };
                let key_param = args
                    .as_ref()
                    .and_then(policy::key_param)
                    .or_else(|| fault_key.as_ref().map(|k| k.args_key.clone()));
                let mut meta = BlockMeta {
                    block_id,
                    content_hash,
                    size_bytes: body.len() as u64,
                    line_count: Some(body.lines().count() as u64),
                    turn: m.turn,
                    role: m.role,
                    kind: b.kind(),
                    tool_name,
                    status: BlockStatus::Resident,
                    summary: None,
                    fault_key,
                    key_param,
                    is_error: b.is_error(),
                    anchored: false,
                    released: false,
                    message_index: mi,
                    block_index: bi,
                };
                if let Some(old) = prior.get(&meta.block_id) {
                    meta.status = old.status;
                    meta.summary = old.summary.clone();
                    meta.anchored = old.anchored;
                    meta.released = old.released;
                } else if evicted.contains(meta.block_id.as_str()) {
                    meta.status = BlockStatus::Evicted;
                } else if collapsed.contains(meta.block_id.as_str()) {
                    meta.status = BlockStatus::Collapsed;
                } else {
                    reg.new_blocks.push(blocks.len());
                }
                blocks.push(meta);
            }
        }
        self.blocks = blocks;
        reg
    }

    /// Mark a resident block evicted and append its record. Paged records
    /// keep `body` in the content cache, subject to the cache budget.
    pub fn record_eviction(
        &mut self,
        index: usize,
        category: EvictionCategory,
        body: &str,
        turn: u32,
    ) -> Result<EvictionRecord, PageStoreError> {
        let meta = self.blocks.get_mut(index).ok_or(PageStoreError::NoSuchBlock(index))?;
        match meta.status {
            BlockStatus::Resident => {}
            BlockStatus::Pinned => return Err(PageStoreError::EvictPinned(meta.block_id.clone())),
            _ => return Err(PageStoreError::NotResident(meta.block_id.clone())),
        }
        meta.status = BlockStatus::Evicted;
        let fault_key = meta
            .fault_key
            .clone()
            .unwrap_or_else(|| FaultKey::new(meta.tool_name.as_deref().unwrap_or("text"), &meta.block_id));
        let cached_body = (category == EvictionCategory::Paged).then(|| Arc::<str>::from(body));
        let record = EvictionRecord {
            block_id: meta.block_id.clone(),
            key_param: meta.key_param.clone().unwrap_or_else(|| fault_key.args_key.clone()),
            fault_key,
            content_hash: meta.content_hash,
            size_bytes: meta.size_bytes,
            line_count: meta.line_count,
            evicted_at_turn: turn,
            category,
            resolved: false,
            cached_body,
        };
        if let Some(b) = &record.cached_body {
            self.cache_bytes += b.len();
        }
        self.evictions.push(record);
        self.enforce_cache_budget();
        Ok(self.evictions.last().cloned().expect("just pushed"))
    }

    fn enforce_cache_budget(&mut self) {
        let budget = if self.cache_budget_bytes == 0 {
            CONTENT_CACHE_BUDGET
        } else {
            self.cache_budget_bytes
        };
        for r in self.evictions.iter_mut() {
            if self.cache_bytes <= budget {
                break;
            }
            if let Some(b) = r.cached_body.take() {
                self.cache_bytes -= b.len();
            }
        }
    }

    /// Index of the most recent unresolved paged eviction with this key.
    pub fn lookup_fault_index(&self, key: &FaultKey) -> Option<usize> {
        self.evictions
            .iter()
            .rposition(|r| r.category == EvictionCategory::Paged && !r.resolved && r.fault_key == *key)
    }

    pub fn lookup_fault(&self, key: &FaultKey) -> Option<&EvictionRecord> {
        self.lookup_fault_index(key).map(|i| &self.evictions[i])
    }

    /// Count a fault against `record` and pin the key iff the content the
    /// model got back is exactly what was evicted.
    pub fn apply_fault(&mut self, record: usize, current_hash: ContentHash, turn: u32) -> PinUpdate {
        let (key, evicted_hash) = {
            let r = &self.evictions[record];
            (r.fault_key.clone(), r.content_hash)
        };
        for r in self.evictions.iter_mut() {
            if r.category == EvictionCategory::Paged && r.fault_key == key {
                r.resolved = true;
            }
        }
        let matches = current_hash == evicted_hash;
        let entry = self.fault_history.entries.entry(key.clone()).or_insert(FaultEntry {
            fault_key: key,
            pinned_hash: evicted_hash,
            fault_count: 0,
            last_access_turn: turn,
            pinned: false,
        });
        entry.fault_count += 1;
        entry.last_access_turn = turn;
        if matches {
            entry.pinned = true;
            entry.pinned_hash = current_hash;
        } else if entry.pinned && entry.pinned_hash != current_hash {
            entry.pinned = false;
        }
        PinUpdate {
            pinned: entry.pinned,
            fault_count: entry.fault_count,
        }
    }

    /// Drop the pin when a pinned key is read back with different content.
    /// Returns true when a pin was removed.
    pub fn unpin_on_edit(&mut self, key: &FaultKey, new_hash: ContentHash) -> bool {
        match self.fault_history.get_mut(key) {
            Some(e) if e.pinned && e.pinned_hash != new_hash => {
                e.pinned = false;
                true
            }
            _ => false,
        }
    }

    /// Classify a fresh read of `key` returning content `hash`.
    pub fn observe_access(&mut self, key: &FaultKey, hash: ContentHash, turn: u32) -> Access {
        if let Some(record) = self.lookup_fault_index(key) {
            let update = self.apply_fault(record, hash, turn);
            return Access::Fault { record, update };
        }
        if self.unpin_on_edit(key, hash) {
            if let Some(e) = self.fault_history.get_mut(key) {
                e.last_access_turn = turn;
            }
            return Access::Unpinned;
        }
        match self.fault_history.get_mut(key) {
            Some(e) => {
                e.last_access_turn = turn;
                if e.pinned {
                    Access::PinnedHit
                } else {
                    Access::Plain
                }
            }
            None => Access::Plain,
        }
    }

    /// Bring resident blocks' pinned/resident status in line with the pin
    /// table. Returns `(index, now_pinned)` for each block that changed.
    pub fn refresh_pins(&mut self) -> Vec<(usize, bool)> {
        let mut changed = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            if !b.status.is_resident() {
                continue;
            }
            let Some(key) = &b.fault_key else { continue };
            if b.kind != BlockKind::ToolResult {
                continue;
            }
            let pinned = self.fault_history.is_pinned(key, &b.content_hash);
            let was = b.status == BlockStatus::Pinned;
            if pinned != was {
                b.status = if pinned { BlockStatus::Pinned } else { BlockStatus::Resident };
                changed.push((i, pinned));
            }
        }
        changed
    }

    /// Most recent paged record for a path with a cached body.
    pub fn cached_body_for_path(&self, path: &str) -> Option<&EvictionRecord> {
        self.evictions
            .iter()
            .rev()
            .find(|r| r.category == EvictionCategory::Paged && r.key_param == path && r.cached_body.is_some())
    }

    fn to_document(&self) -> CheckpointDoc {
        CheckpointDoc {
            version: CHECKPOINT_VERSION,
            session_id: self.session_id.clone(),
            blocks: self.blocks.clone(),
            evictions: self.evictions.clone(),
            fault_history: self.fault_history.clone(),
            used_tools: self.stubs.used_tools.clone(),
            collapses: self.collapses.clone(),
            static_hashes: self.static_hashes.clone(),
            last_usage_tokens: self.last_usage_tokens,
            last_message_count: self.last_message_count,
        }
    }

    fn from_document(doc: CheckpointDoc, path: Option<PathBuf>) -> Self {
        let mut s = SessionState::new(doc.session_id);
        s.blocks = doc.blocks;
        s.evictions = doc.evictions;
        s.fault_history = doc.fault_history;
        s.stubs.used_tools = doc.used_tools;
        s.collapses = doc.collapses;
        s.static_hashes = doc.static_hashes;
        s.last_usage_tokens = doc.last_usage_tokens;
        s.last_message_count = doc.last_message_count;
        s.checkpoint_path = path;
        s
    }
}

/// On-disk checkpoint. Metadata only: cached bodies are never written.
#[derive(Debug, Serialize, Deserialize)]
struct CheckpointDoc {
    version: u32,
    #[serde(default)]
    session_id: String,
    blocks: Vec<BlockMeta>,
    evictions: Vec<EvictionRecord>,
    fault_history: FaultHistory,
    used_tools: BTreeSet<String>,
    #[serde(default)]
    collapses: Vec<CollapseRecord>,
    #[serde(default)]
    static_hashes: Vec<String>,
    #[serde(default)]
    last_usage_tokens: Option<u64>,
    #[serde(default)]
    last_message_count: usize,
}

/// `<dir>/<session_id>.json`.
pub fn checkpoint_file(dir: &Path, session_id: &str) -> PathBuf {
    dir.join(format!("{session_id}.json"))
}

/// Write `bytes` to a temporary file beside `path`, then rename it over
/// `path`. `before_rename` runs after the data is synced and before the
/// rename; an error from it abandons the write and leaves `path` untouched.
pub fn write_atomic_with(
    path: &Path,
    bytes: &[u8],
    before_rename: impl FnOnce(&Path) -> io::Result<()>,
) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::Builder::new().prefix(".ckpt-").suffix(".tmp").tempfile_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    before_rename(tmp.path())?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    write_atomic_with(path, bytes, |_| Ok(()))
}

pub fn checkpoint_save(state: &SessionState) -> Result<PathBuf, CheckpointError> {
    let path = state.checkpoint_path.clone().ok_or(CheckpointError::NoPath)?;
    checkpoint_save_to(state, &path)?;
    Ok(path)
}

pub fn checkpoint_save_to(state: &SessionState, path: &Path) -> Result<(), CheckpointError> {
    checkpoint_save_with(state, path, |_| Ok(()))
}

/// [`checkpoint_save_to`] with a hook between the temporary write and the
/// rename (see [`write_atomic_with`]).
pub fn checkpoint_save_with(
    state: &SessionState,
    path: &Path,
    before_rename: impl FnOnce(&Path) -> io::Result<()>,
) -> Result<(), CheckpointError> {
    let bytes = serde_json::to_vec_pretty(&state.to_document())?;
    write_atomic_with(path, &bytes, before_rename).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Load a checkpoint. A missing file gives a fresh session; an unreadable
/// or corrupt one gives a fresh session and a warning.
pub fn checkpoint_load(path: &Path, session_id: &str) -> SessionState {
    let fresh = || SessionState::new(session_id).with_checkpoint(path.to_path_buf());
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return fresh(),
        Err(e) => {
            warn!(path = %path.display(), error = %e, "checkpoint unreadable; starting fresh");
            return fresh();
        }
    };
    match serde_json::from_slice::<CheckpointDoc>(&bytes) {
        Ok(doc) if doc.version == CHECKPOINT_VERSION => {
            let mut s = SessionState::from_document(doc, Some(path.to_path_buf()));
            if s.session_id.is_empty() {
                s.session_id = session_id.to_string();
            }
            s
        }
        Ok(doc) => {
            warn!(path = %path.display(), version = doc.version, "unsupported checkpoint version; starting fresh");
            fresh()
        }
        Err(e) => {
            warn!(path = %path.display(), error = %e, "corrupt checkpoint; starting fresh");
            fresh()
        }
    }
}
