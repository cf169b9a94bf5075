//! Request shrinking that is not paging: tool stubs, skill dedup, and
//! static-segment hash tracking (report only).

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cooperative::PHANTOM_TOOL_NAMES;
use crate::pagestore::ContentHash;
use crate::wire::{BlockKind, Request, Role, ToolDef};

pub const DEFAULT_SKILL_PREFIXES: [&str; 3] = ["base", "example-skills:base", "document-skills:base"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StubState {
    /// Latest full definition seen for each tool.
    pub full_defs: BTreeMap<String, ToolDef>,
    /// Tools the model has called this session. Only ever grows.
    pub used_tools: BTreeSet<String>,
}

/// Name, first description line, and an empty object schema. Carries over
/// `cache_control` so prompt-cache breakpoints stay where the client put them.
pub fn make_stub(def: &ToolDef) -> ToolDef {
    let first_line = def.description().lines().next().unwrap_or_default();
    let mut stub = ToolDef::new(def.name(), first_line, json!({"type": "object", "properties": {}}));
    if let Some(cc) = def.raw_field("cache_control") {
        stub = stub.with_field("cache_control", cc.clone());
    }
    stub
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StubReport {
    pub stubbed: Vec<String>,
    pub full: Vec<String>,
    pub bytes_saved: u64,
}

/// Replace every unused tool's definition with its stub. The entry count
/// never changes. A stub that would not be smaller is skipped.
pub fn stub_tools(req: &mut Request, state: &mut StubState) -> StubReport {
    let mut report = StubReport::default();
    for def in req.tools.iter_mut() {
        let name = def.name().to_string();
        state.full_defs.insert(name.clone(), def.clone());
        if state.used_tools.contains(&name) {
            report.full.push(name);
            continue;
        }
        let stub = make_stub(def);
        let (full, small) = (def.byte_size(), stub.byte_size());
        if small >= full {
            report.full.push(name);
            continue;
        }
        report.bytes_saved += (full - small) as u64;
        report.stubbed.push(name);
        *def = stub;
    }
    report
}

/// Add every non-phantom tool the history has called. Returns the names
/// that were new.
pub fn note_tool_use(state: &mut StubState, req: &Request) -> Vec<String> {
    let mut added = Vec::new();
    for m in req.messages.iter().filter(|m| m.role == Role::Assistant) {
        for b in m.blocks.iter().filter(|b| b.kind() == BlockKind::ToolUse) {
            let Some(name) = b.tool_name() else { continue };
            if PHANTOM_TOOL_NAMES.contains(&name) {
                continue;
            }
            if state.used_tools.insert(name.to_string()) {
                added.push(name.to_string());
            }
        }
    }
    added
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DedupReport {
    /// Full names of removed entries, in document order.
    pub removed: Vec<String>,
    pub bytes_saved: u64,
}

struct Entry {
    start: usize,
    end: usize,
    name: String,
}

fn skill_name(line: &str) -> Option<&str> {
    let rest = line.strip_prefix("- ")?;
    let end = rest.find(": ").unwrap_or(rest.len());
    let name = rest[..end].trim();
    (!name.is_empty() && !name.contains(char::is_whitespace)).then_some(name)
}

fn has_prefix(name: &str, prefixes: &[String]) -> bool {
    prefixes.iter().any(|p| name.strip_prefix(p.as_str()).is_some_and(|r| r.starts_with(':')))
}

/// The part after the last `:`.
pub fn base_name(name: &str) -> &str {
    name.rsplit(':').next().unwrap_or(name)
}

/// Remove skill entries whose base name already appeared earlier in the
/// same text. Returns the new text when anything was removed.
pub fn dedup_skill_text(text: &str, prefixes: &[String], seen: &mut HashSet<String>) -> Option<(String, Vec<String>)> {
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    let mut entries = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i].trim_end_matches(['\n', '\r']);
        match skill_name(line) {
            Some(name) if has_prefix(name, prefixes) => {
                let start = i;
                i += 1;
                while i < lines.len() {
                    let l = lines[i].trim_end_matches(['\n', '\r']);
                    if l.is_empty() || !l.starts_with(char::is_whitespace) {
                        break;
                    }
                    i += 1;
                }
                entries.push(Entry {
                    start,
                    end: i,
                    name: name.to_string(),
                });
            }
            _ => i += 1,
        }
    }
    let mut drop = vec![false; lines.len()];
    let mut removed = Vec::new();
    for e in entries {
        if !seen.insert(base_name(&e.name).to_string()) {
            drop[e.start..e.end].iter_mut().for_each(|d| *d = true);
            removed.push(e.name);
        }
    }
    if removed.is_empty() {
        return None;
    }
    let mut out: String = lines.iter().zip(&drop).filter(|(_, d)| !**d).map(|(l, _)| *l).collect();
    // A removed final entry leaves the previous line's newline dangling.
    if !text.ends_with('\n') && out.ends_with('\n') {
        out.pop();
    }
    Some((out, removed))
}

/// Deduplicate prefixed skill entries across the user-role text blocks of
/// the request, keeping the first occurrence of each base name.
pub fn dedup_skills(req: &mut Request, prefixes: &[String]) -> DedupReport {
    let mut report = DedupReport::default();
    let mut seen = HashSet::new();
    for m in req.messages.iter_mut().filter(|m| m.role == Role::User) {
        for b in m.blocks.iter_mut().filter(|b| b.kind() == BlockKind::Text) {
            let text = b.body();
            if let Some((new_text, removed)) = dedup_skill_text(&text, prefixes, &mut seen) {
                report.bytes_saved += (text.len() - new_text.len()) as u64;
                report.removed.extend(removed);
                b.replace_body(new_text);
            }
        }
    }
    report
}

pub fn default_skill_prefixes() -> Vec<String> {
    DEFAULT_SKILL_PREFIXES.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentStatus {
    Stable,
    Changed,
    New,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticSegment {
    pub index: usize,
    pub hash: String,
    pub bytes: u64,
    pub status: SegmentStatus,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StaticReport {
    pub segments: Vec<StaticSegment>,
}

impl StaticReport {
    pub fn hashes(&self) -> Vec<String> {
        self.segments.iter().map(|s| s.hash.clone()).collect()
    }

    pub fn stable_bytes(&self) -> u64 {
        self.segments
            .iter()
            .filter(|s| s.status == SegmentStatus::Stable)
            .map(|s| s.bytes)
            .sum()
    }
}

/// Compare each system-prompt segment with the same position last request.
pub fn track_static(req: &Request, prior_hashes: &[String]) -> StaticReport {
    let segments = req
        .system_prompt
        .iter()
        .enumerate()
        .map(|(index, text)| {
            let hash = ContentHash::of(text.as_bytes()).hex();
            let status = match prior_hashes.get(index) {
                None => SegmentStatus::New,
                Some(h) if *h == hash => SegmentStatus::Stable,
                Some(_) => SegmentStatus::Changed,
            };
            StaticSegment {
                index,
                hash,
                bytes: text.len() as u64,
                status,
            }
        })
        .collect();
    StaticReport { segments }
}

/// Convenience for fixtures: a tool definition from raw JSON.
pub fn tool_from_json(v: Value) -> ToolDef {
    ToolDef::from_value(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{parse_request, ContentBlock, Message};
    use proptest::prelude::*;

    fn big_tool(name: &str) -> ToolDef {
        let desc = format!("Does {name} things.\n{}", "More detail. ".repeat(40));
        ToolDef::new(
            name,
            &desc,
            json!({"type": "object", "properties": {"a": {"type": "string", "description": "x".repeat(200)}}}),
        )
    }

    fn tools_request(names: &[&str]) -> Request {
        let mut req = Request::new("m", vec![Message::new(Role::User, vec![ContentBlock::text("hi")])]);
        req.tools = names.iter().map(|n| big_tool(n)).collect();
        req
    }

    #[test]
    fn stub_shape() {
        let stub = make_stub(&big_tool("NotebookEdit"));
        assert_eq!(
            serde_json::to_value(&stub).unwrap(),
            json!({"name": "NotebookEdit", "description": "Does NotebookEdit things.", "input_schema": {"type": "object", "properties": {}}})
        );
    }

    #[test]
    fn unused_tools_are_stubbed_used_kept() {
        let mut req = tools_request(&["Read", "Bash", "Grep", "Glob"]);
        let before: Vec<usize> = req.tools.iter().map(ToolDef::byte_size).collect();
        let mut st = StubState::default();
        st.used_tools.insert("Read".into());
        let r = stub_tools(&mut req, &mut st);
        assert_eq!(req.tools.len(), 4);
        assert_eq!(r.stubbed, vec!["Bash", "Grep", "Glob"]);
        assert_eq!(req.tools[0].byte_size(), before[0]);
        let saved: usize = (1..4).map(|i| before[i] - req.tools[i].byte_size()).sum();
        assert_eq!(r.bytes_saved, saved as u64);
        assert_eq!(st.full_defs.len(), 4);
    }

    #[test]
    fn all_used_is_identity() {
        let mut req = tools_request(&["Read", "Bash"]);
        let orig = req.clone();
        let mut st = StubState::default();
        st.used_tools.extend(["Read".to_string(), "Bash".to_string()]);
        let r = stub_tools(&mut req, &mut st);
        assert_eq!(r.bytes_saved, 0);
        assert_eq!(req, orig);
    }

    #[test]
    fn note_tool_use_skips_phantoms() {
        let req = Request::new(
            "m",
            vec![
                Message::new(Role::User, vec![ContentBlock::text("go")]),
                Message::new(
                    Role::Assistant,
                    vec![
                        ContentBlock::tool_use("1", "Read", json!({})),
                        ContentBlock::tool_use("2", "Bash", json!({})),
                        ContentBlock::tool_use("3", "memory_release", json!({"paths": []})),
                    ],
                ),
            ],
        );
        let mut st = StubState::default();
        let added = note_tool_use(&mut st, &req);
        assert_eq!(added, vec!["Read", "Bash"]);
        assert!(!st.used_tools.contains("memory_release"));
        assert!(note_tool_use(&mut st, &req).is_empty());
        let empty = Request::new("m", vec![]);
        assert!(note_tool_use(&mut st, &empty).is_empty());
        assert_eq!(st.used_tools.len(), 2);
    }

    fn skills_text(names: &[&str]) -> String {
        let mut s = String::from("Available skills:\n");
        for n in names {
            s.push_str(&format!("- {n}: does something\n"));
        }
        s
    }

    #[test]
    fn triplicated_entry_keeps_first() {
        let text = skills_text(&["base:foo", "example-skills:base:foo", "document-skills:base:foo"]);
        let (out, removed) = dedup_skill_text(&text, &default_skill_prefixes(), &mut HashSet::new()).unwrap();
        assert_eq!(out, skills_text(&["base:foo"]));
        assert_eq!(removed, vec!["example-skills:base:foo", "document-skills:base:foo"]);
    }

    #[test]
    fn no_duplicates_unchanged() {
        let text = skills_text(&["base:foo", "base:bar"]);
        assert!(dedup_skill_text(&text, &default_skill_prefixes(), &mut HashSet::new()).is_none());
    }

    #[test]
    fn continuation_lines_go_with_their_entry() {
        let text = "- base:foo: first\n  more foo\n- example-skills:base:foo: dup\n  more dup\n- base:bar: keep\n";
        let (out, _) = dedup_skill_text(text, &default_skill_prefixes(), &mut HashSet::new()).unwrap();
        assert_eq!(out, "- base:foo: first\n  more foo\n- base:bar: keep\n");
    }

    #[test]
    fn unprefixed_lists_are_left_alone() {
        let text = "- foo: a\n- other:foo: b\n";
        assert!(dedup_skill_text(text, &default_skill_prefixes(), &mut HashSet::new()).is_none());
    }

    #[test]
    fn dedup_through_request_keeps_string_content() {
        let text = skills_text(&["base:foo", "document-skills:base:foo"]);
        let raw = serde_json::to_vec(&json!({"model": "m", "messages": [{"role": "user", "content": text}]})).unwrap();
        let mut req = parse_request(&raw).unwrap();
        let r = dedup_skills(&mut req, &default_skill_prefixes());
        assert_eq!(r.removed.len(), 1);
        let out: Value = serde_json::from_slice(&req.serialize()).unwrap();
        assert_eq!(out["messages"][0]["content"], json!(skills_text(&["base:foo"])));
    }

    #[test]
    fn static_tracking() {
        let raw = |sys: Value| {
            parse_request(&serde_json::to_vec(&json!({"model": "m", "system": sys, "messages": []})).unwrap()).unwrap()
        };
        let r1 = track_static(&raw(json!([{"type": "text", "text": "a"}, {"type": "text", "text": "b"}])), &[]);
        assert!(r1.segments.iter().all(|s| s.status == SegmentStatus::New));
        let r2 = track_static(&raw(json!([{"type": "text", "text": "a"}, {"type": "text", "text": "b"}])), &r1.hashes());
        assert!(r2.segments.iter().all(|s| s.status == SegmentStatus::Stable));
        let r3 = track_static(&raw(json!([{"type": "text", "text": "a"}, {"type": "text", "text": "B"}])), &r1.hashes());
        assert_eq!(r3.segments[0].status, SegmentStatus::Stable);
        assert_eq!(r3.segments[1].status, SegmentStatus::Changed);
    }

    proptest! {
        #[test]
        fn dedup_is_idempotent(picks in proptest::collection::vec((0usize..3, 0usize..6), 0..30)) {
            let prefixes = ["base", "example-skills:base", "document-skills:base"];
            let names: Vec<String> = picks.iter().map(|(p, n)| format!("{}:s{n}", prefixes[*p])).collect();
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let text = skills_text(&refs);
            let once = dedup_skill_text(&text, &default_skill_prefixes(), &mut HashSet::new())
                .map(|(t, _)| t)
                .unwrap_or(text.clone());
            prop_assert!(dedup_skill_text(&once, &default_skill_prefixes(), &mut HashSet::new()).is_none());
            let distinct: HashSet<usize> = picks.iter().map(|(_, n)| *n).collect();
            prop_assert_eq!(once.lines().count() - 1, distinct.len());
        }

        #[test]
        fn stubbing_preserves_entry_count_and_restores_monotonically(
            uses in proptest::collection::vec(proptest::option::of(0usize..6), 1..12)
        ) {
            let names = ["A", "B", "C", "D", "E", "F"];
            let mut st = StubState::default();
            let mut prev_full: BTreeSet<String> = BTreeSet::new();
            for u in uses {
                if let Some(i) = u {
                    st.used_tools.insert(names[i].to_string());
                }
                let mut req = tools_request(&names);
                stub_tools(&mut req, &mut st);
                prop_assert_eq!(req.tools.len(), names.len());
                let full: BTreeSet<String> = req
                    .tools
                    .iter()
                    .filter(|t| t.input_schema() != Some(&json!({"type": "object", "properties": {}})))
                    .map(|t| t.name().to_string())
                    .collect();
                prop_assert!(prev_full.is_subset(&full));
                prev_full = full;
            }
        }
    }
}
