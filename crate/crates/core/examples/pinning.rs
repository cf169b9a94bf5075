//! Evict a file, fault it back, watch it pin; then edit it and watch the
//! pin drop.
//!
//! cargo run --example pinning

use pichay::policy::select_evictions;
use pichay::wire::{index_turns, ContentBlock, Message, Request, Role};
use pichay::{ContentHash, FaultKey, PolicyConfig, PressureZone, SessionState};
use serde_json::json;

fn read_turn(msgs: &mut Vec<Message>, t: usize, body: &str) {
    let id = format!("r{t}");
    msgs.push(Message::new(Role::User, vec![ContentBlock::text(format!("turn {t}"))]));
    msgs.push(Message::new(Role::Assistant, vec![ContentBlock::tool_use(&id, "Read", json!({"file_path": "/src/lib.rs"}))]));
    msgs.push(Message::new(Role::User, vec![ContentBlock::tool_result(&id, body, false)]));
}

fn main() {
    let cfg = PolicyConfig::default();
    let key = FaultKey::new("Read", "/src/lib.rs");
    let v1 = "fn main() {}\n".repeat(100);
    let mut msgs = Vec::new();
    read_turn(&mut msgs, 0, &v1);
    for t in 1..7 {
        msgs.push(Message::new(Role::User, vec![ContentBlock::text(format!("turn {t}"))]));
    }
    let mut req = Request::new("demo", msgs.clone());
    let turn = index_turns(&mut req).unwrap();
    let mut st = SessionState::new("demo");
    st.register_blocks(&req, &cfg);
    for c in select_evictions(&st.blocks, &st.fault_history, PressureZone::Involuntary, turn, &cfg) {
        let r = st.record_eviction(c.index, c.category, &v1, turn).unwrap();
        println!("turn {turn}: evicted {} ({:?})", r.fault_key, r.category);
    }

    // Same content comes back: fault, then pin.
    let access = st.observe_access(&key, ContentHash::of(v1.as_bytes()), turn + 1);
    println!("re-read identical content: {access:?}");
    println!("pinned: {}", st.fault_history.is_pinned(&key, &ContentHash::of(v1.as_bytes())));

    // The file changes on disk; reading the new version drops the pin.
    let v2 = format!("{v1}// edited\n");
    let access = st.observe_access(&key, ContentHash::of(v2.as_bytes()), turn + 2);
    println!("read after edit: {access:?}");
    println!("pinned: {}", st.fault_history.get(&key).is_some_and(|e| e.pinned));
}
