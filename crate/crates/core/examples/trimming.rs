//! Tool stubbing and skill de-duplication on bundled fixtures.
//!
//! cargo run --example trimming

use pichay::trimming::{default_skill_prefixes, dedup_skills, note_tool_use, stub_tools, StubState};
use pichay::wire::parse_request;
use serde_json::json;

const TOOLS: &str = include_str!("../tests/fixtures/tools_18.json");
const SKILLS: &str = include_str!("../tests/fixtures/skills_triplicated.json");

fn main() {
    let tools: serde_json::Value = serde_json::from_str(TOOLS).unwrap();
    let body = json!({"model": "m", "max_tokens": 8, "tools": tools, "messages": [
        {"role": "user", "content": "fix the bug"},
        {"role": "assistant", "content": [{"type": "tool_use", "id": "a", "name": "Read", "input": {"file_path": "/x"}}]},
        {"role": "user", "content": [{"type": "tool_result", "tool_use_id": "a", "content": "..."}]}
    ]});
    let mut req = parse_request(&serde_json::to_vec(&body).unwrap()).unwrap();
    let mut st = StubState::default();
    note_tool_use(&mut st, &req);
    let r = stub_tools(&mut req, &mut st);
    println!("stubbed {} of {} tools, saving {} bytes", r.stubbed.len(), req.tools.len(), r.bytes_saved);
    println!("kept full: {:?}", r.full);

    let mut skills = parse_request(SKILLS.as_bytes()).unwrap();
    let d = dedup_skills(&mut skills, &default_skill_prefixes());
    println!("\nremoved {} duplicate skill entries, saving {} bytes", d.removed.len(), d.bytes_saved);
    for name in d.removed.iter().take(4) {
        println!("  {name}");
    }
}
