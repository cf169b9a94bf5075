//! Retrieval handles: the text left behind when a block is evicted.
//!
//! Two byte-exact templates exist and both are stable, versioned contracts
//! (deployed transcripts contain them):
//!
//! ```text
//! [Paged out: Read /path/to/file.py (8,192 bytes, 187 lines). Re-read the file if you need its content.]
//! [Paged out: Read /path/to/file.py (12,450 bytes, 287 lines). Re-read if needed.]
//! [Cleaned up: Bash output (2,048 bytes).]
//! ```
//!
//! The long paged form is preferred; the short one is used when the long
//! one would reach [`HANDLE_BUDGET`] bytes. Keys that still do not fit are
//! shortened middle-out with `…`.

use std::sync::LazyLock;

use regex::Regex;

use crate::pagestore::{EvictionCategory, EvictionRecord};

pub const PAGED_PREFIX: &str = "[Paged out: ";
pub const CLEANED_PREFIX: &str = "[Cleaned up: ";
/// Rendered handles are always strictly shorter than this.
pub const HANDLE_BUDGET: usize = 300;

const LONG_TAIL: &str = "Re-read the file if you need its content.";
const SHORT_TAIL: &str = "Re-read if needed.";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Handle {
    pub tool_name: String,
    /// Empty for cleaned-up (gc) handles.
    pub key_param: String,
    pub size_bytes: u64,
    pub line_count: Option<u64>,
    pub paged: bool,
    pub rendered: String,
}

/// `8192` → `"8,192"`.
pub fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn paged_text(tool: &str, key: &str, size: u64, lines: Option<u64>, tail: &str) -> String {
    let mut meta = format!("{} bytes", thousands(size));
    if let Some(l) = lines {
        meta.push_str(&format!(", {} lines", thousands(l)));
    }
    if key.is_empty() {
        format!("{PAGED_PREFIX}{tool} ({meta}). {tail}]")
    } else {
        format!("{PAGED_PREFIX}{tool} {key} ({meta}). {tail}]")
    }
}

/// Shorten `s` to at most `max` bytes, keeping both ends.
pub fn truncate_middle(s: &str, max: usize) -> String {
    const ELLIPSIS: &str = "…";
    if s.len() <= max {
        return s.to_string();
    }
    if max <= ELLIPSIS.len() {
        return String::new();
    }
    let keep = max - ELLIPSIS.len();
    let mut head_len = keep / 2;
    while !s.is_char_boundary(head_len) {
        head_len -= 1;
    }
    let mut tail_start = s.len() - (keep - head_len);
    while !s.is_char_boundary(tail_start) {
        tail_start += 1;
    }
    format!("{}{ELLIPSIS}{}", &s[..head_len], &s[tail_start..])
}

fn clean_tool(tool: &str) -> String {
    let t: String = tool.chars().map(|c| if c.is_whitespace() { '_' } else { c }).collect();
    if t.is_empty() {
        "tool".into()
    } else {
        truncate_middle(&t, 64)
    }
}

pub fn render_paged(tool: &str, key: &str, size: u64, lines: Option<u64>) -> String {
    let tool = clean_tool(tool);
    let key: String = key.chars().map(|c| if c.is_control() { ' ' } else { c }).collect();
    let key = key.as_str();
    let long = paged_text(&tool, key, size, lines, LONG_TAIL);
    if long.len() < HANDLE_BUDGET {
        return long;
    }
    let short = paged_text(&tool, key, size, lines, SHORT_TAIL);
    if short.len() < HANDLE_BUDGET {
        return short;
    }
    let overhead = short.len() - key.len();
    let key = truncate_middle(key, HANDLE_BUDGET - 1 - overhead);
    paged_text(&tool, &key, size, lines, SHORT_TAIL)
}

pub fn render_cleaned(tool: &str, size: u64) -> String {
    format!("{CLEANED_PREFIX}{} output ({} bytes).]", clean_tool(tool), thousands(size))
}

/// Tombstone text for an eviction record.
pub fn render_handle(record: &EvictionRecord) -> String {
    match record.category {
        EvictionCategory::Paged => render_paged(
            &record.fault_key.tool_name,
            &record.key_param,
            record.size_bytes,
            record.line_count,
        ),
        EvictionCategory::Gc => render_cleaned(&record.fault_key.tool_name, record.size_bytes),
    }
}

static PAGED_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"^\[Paged out: (\S+)(?: (.+))? \(([\d,]+) bytes(?:, ([\d,]+) lines)?\)\. (?:Re-read the file if you need its content\.|Re-read if needed\.)\]$",
    )
    .expect("static regex")
});

static CLEANED_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\[Cleaned up: (\S+) output \(([\d,]+) bytes\)\.\]$").expect("static regex"));

fn parse_num(s: &str) -> Option<u64> {
    s.replace(',', "").parse().ok()
}

/// Recognize either template. Surrounding whitespace is ignored.
pub fn parse_handle(text: &str) -> Option<Handle> {
    let t = text.trim();
    if let Some(c) = PAGED_RE.captures(t) {
        return Some(Handle {
            tool_name: c[1].to_string(),
            key_param: c.get(2).map(|m| m.as_str().to_string()).unwrap_or_default(),
            size_bytes: parse_num(&c[3])?,
            line_count: match c.get(4) {
                Some(m) => Some(parse_num(m.as_str())?),
                None => None,
            },
            paged: true,
            rendered: t.to_string(),
        });
    }
    let c = CLEANED_RE.captures(t)?;
    Some(Handle {
        tool_name: c[1].to_string(),
        key_param: String::new(),
        size_bytes: parse_num(&c[2])?,
        line_count: None,
        paged: false,
        rendered: t.to_string(),
    })
}

pub fn is_handle(text: &str) -> bool {
    let t = text.trim_start();
    (t.starts_with(PAGED_PREFIX) || t.starts_with(CLEANED_PREFIX)) && parse_handle(t).is_some()
}
