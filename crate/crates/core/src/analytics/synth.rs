//! Deterministic synthetic sessions with known paging behavior.
//!
//! Every turn is `user text → assistant tool_use → user tool_result →
//! assistant text`, so one tool result lands in each user turn. Bodies are
//! derived from the key alone; re-reading a path yields identical bytes.

use serde_json::json;

use crate::analytics::transcript::{Transcript, TranscriptRecord};
use crate::wire::{ContentBlock, Role};

#[derive(Debug, Clone, PartialEq)]
pub enum TurnSpec {
    Read { path: String, bytes: usize },
    Bash { command: String, bytes: usize },
    /// Tool call that fails; never evicted.
    Error { path: String },
    Text,
}

impl TurnSpec {
    pub fn read(path: impl Into<String>, bytes: usize) -> Self {
        TurnSpec::Read { path: path.into(), bytes }
    }

    pub fn bash(command: impl Into<String>, bytes: usize) -> Self {
        TurnSpec::Bash {
            command: command.into(),
            bytes,
        }
    }
}

/// `bytes` of ASCII text determined by `seed`.
pub fn body_for(seed: &str, bytes: usize) -> String {
    let mut out = String::with_capacity(bytes + 64);
    let mut i = 0u64;
    while out.len() < bytes {
        let line = format!("{seed} {i:06} ...\n");
        out.push_str(&line);
        i += 1;
    }
    out.truncate(bytes);
    out
}

pub fn build_session(id: &str, turns: &[TurnSpec]) -> Transcript {
    let mut records = Vec::new();
    for (t, spec) in turns.iter().enumerate() {
        records.push(TranscriptRecord::new(
            Role::User,
            vec![ContentBlock::text(format!("{id} turn {t}"))],
        ));
        let tu_id = format!("toolu_{id}_{t}");
        let (name, input, body, is_error) = match spec {
            TurnSpec::Read { path, bytes } => ("Read", json!({"file_path": path}), body_for(path, *bytes), false),
            TurnSpec::Bash { command, bytes } => (
                "Bash",
                json!({"command": command}),
                body_for(&format!("{id}:{t}:{command}"), *bytes),
                false,
            ),
            TurnSpec::Error { path } => (
                "Read",
                json!({"file_path": path}),
                format!("<tool_use_error>File does not exist: {path}</tool_use_error>\n{}", "e".repeat(600)),
                true,
            ),
            TurnSpec::Text => {
                records.push(TranscriptRecord::new(
                    Role::Assistant,
                    vec![ContentBlock::text(format!("reply {t}"))],
                ));
                continue;
            }
        };
        records.push(TranscriptRecord::new(
            Role::Assistant,
            vec![ContentBlock::tool_use(tu_id.clone(), name, input)],
        ));
        records.push(TranscriptRecord::new(
            Role::User,
            vec![ContentBlock::tool_result(tu_id, body, is_error)],
        ));
        records.push(TranscriptRecord::new(
            Role::Assistant,
            vec![ContentBlock::text(format!("done {t}"))],
        ));
    }
    Transcript::new(id, records)
}

/// 15 evictions (11 gc, 4 paged) in turns 0–14, one identical re-read of
/// the turn-2 file at turn 15, then five text-only turns.
pub fn session_a() -> Transcript {
    let mut turns = Vec::new();
    for t in 0..15 {
        if [2, 5, 9, 12].contains(&t) {
            turns.push(TurnSpec::read(format!("/repo/src/mod_{t}.rs"), 2_400));
        } else {
            turns.push(TurnSpec::bash(format!("cargo test step {t}"), 1_200));
        }
    }
    turns.push(TurnSpec::read("/repo/src/mod_2.rs", 2_400));
    turns.extend(std::iter::repeat_n(TurnSpec::Text, 5));
    build_session("session-a", &turns)
}

pub const FAULT_SUITE_SESSIONS: usize = 20;
pub const FAULT_SUITE_TURNS: usize = 55;
/// (session, turn re-read, turn originally read).
pub const FAULT_SUITE_REREADS: [(usize, usize, usize); 3] = [(0, 52, 3), (7, 51, 9), (13, 53, 30)];

/// 20 sessions of 55 turns: two Reads then one Bash, repeating. Under the
/// default policy every result older than the last five turns is evicted,
/// 1,000 in total; three late turns re-read an early, long-evicted file.
pub fn fault_suite() -> Vec<Transcript> {
    (0..FAULT_SUITE_SESSIONS)
        .map(|s| {
            let turns: Vec<TurnSpec> = (0..FAULT_SUITE_TURNS)
                .map(|t| {
                    if let Some(&(_, _, orig)) = FAULT_SUITE_REREADS.iter().find(|r| r.0 == s && r.1 == t) {
                        return TurnSpec::read(format!("/w{s}/src/file_{orig}.rs"), 600 + 37 * orig);
                    }
                    if t % 3 == 2 {
                        TurnSpec::bash(format!("make check-{t}"), 700 + 11 * t)
                    } else {
                        TurnSpec::read(format!("/w{s}/src/file_{t}.rs"), 600 + 37 * t)
                    }
                })
                .collect();
            build_session(&format!("suite-{s:02}"), &turns)
        })
        .collect()
}

/// Bash-only sessions: everything evicted is garbage collection.
pub fn gc_only_suite(sessions: usize, turns: usize) -> Vec<Transcript> {
    (0..sessions)
        .map(|s| {
            let ts: Vec<TurnSpec> = (0..turns).map(|t| TurnSpec::bash(format!("ls -la /tmp/{s}/{t}"), 900)).collect();
            build_session(&format!("gc-{s}"), &ts)
        })
        .collect()
}

/// A long session whose context grows every turn: one new large Read per
/// turn, with a Bash run every fourth turn.
pub fn growing_workload(turns: usize) -> Transcript {
    let ts: Vec<TurnSpec> = (0..turns)
        .map(|t| {
            if t % 4 == 3 {
                TurnSpec::bash(format!("pytest -k case_{t}"), 1_500 + 20 * t)
            } else {
                TurnSpec::read(format!("/proj/pkg/module_{t}.py"), 3_000 + 40 * t)
            }
        })
        .collect();
    build_session("growing", &ts)
}

/// Serialize transcripts as bare-message JSONL, one file per session.
pub fn write_suite(dir: &std::path::Path, suite: &[Transcript]) -> std::io::Result<Vec<std::path::PathBuf>> {
    use std::io::Write;
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for t in suite {
        let path = dir.join(format!("{}.jsonl", t.session_id));
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
        for m in t.messages() {
            serde_json::to_writer(&mut f, &m)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        out.push(path);
    }
    Ok(out)
}
