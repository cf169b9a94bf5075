//! Append-only JSONL decision log.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Evict,
    Fault,
    Pin,
    Unpin,
    Stub,
    Dedup,
    Directive,
    Phantom,
    Advisory,
    Forward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionLogRecord {
    pub timestamp: String,
    pub session_id: String,
    pub turn: u32,
    pub zone: String,
    pub action: Action,
    pub subject: String,
    pub bytes_delta: i64,
    pub detail: String,
}

pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Writes one line per record and flushes after every batch. Write errors
/// never propagate; they are counted.
#[derive(Debug)]
pub struct DecisionLog {
    path: Option<PathBuf>,
    out: Mutex<Option<BufWriter<File>>>,
    failures: AtomicU64,
    written: AtomicU64,
}

impl DecisionLog {
    pub fn disabled() -> Self {
        DecisionLog {
            path: None,
            out: Mutex::new(None),
            failures: AtomicU64::new(0),
            written: AtomicU64::new(0),
        }
    }

    pub fn open(path: &Path) -> io::Result<Self> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(DecisionLog {
            path: Some(path.to_path_buf()),
            out: Mutex::new(Some(BufWriter::new(f))),
            failures: AtomicU64::new(0),
            written: AtomicU64::new(0),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn append(&self, records: &[DecisionLogRecord]) {
        if records.is_empty() {
            return;
        }
        let mut guard = match self.out.lock() {
            Ok(g) => g,
            Err(poisoned) => poisoned.into_inner(),
        };
        let Some(w) = guard.as_mut() else { return };
        let result = (|| -> io::Result<()> {
            for r in records {
                serde_json::to_writer(&mut *w, r)?;
                w.write_all(b"\n")?;
            }
            w.flush()
        })();
        match result {
            Ok(()) => {
                self.written.fetch_add(records.len() as u64, Ordering::Relaxed);
            }
            Err(e) => {
                self.failures.fetch_add(1, Ordering::Relaxed);
                tracing::warn!(error = %e, "decision log write failed");
            }
        }
    }

    /// Failed write batches since start.
    pub fn failures(&self) -> u64 {
        self.failures.load(Ordering::Relaxed)
    }

    pub fn written(&self) -> u64 {
        self.written.load(Ordering::Relaxed)
    }
}

/// Read a decision log, skipping lines that do not parse.
pub fn read_log(path: &Path) -> io::Result<Vec<DecisionLogRecord>> {
    let f = File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => out.push(r),
            Err(e) => tracing::warn!(error = %e, "skipping malformed log line"),
        }
    }
    Ok(out)
}
