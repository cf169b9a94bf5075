//! Which tool results get evicted, zone by zone, on a synthetic session.
//!
//! cargo run --example eviction_policy

use pichay::analytics::synth::session_a;
use pichay::policy::{compute_zone, effective_thresholds, select_evictions};
use pichay::wire::{index_turns, Request};
use pichay::{PolicyConfig, PressureZone, SessionState};

fn main() {
    let cfg = PolicyConfig::default();
    for tokens in [10_000, 75_000, 110_000, 150_000] {
        println!("{tokens:>7} tokens -> {:?}", compute_zone(tokens, &cfg));
    }

    let mut req = Request::new("demo", session_a().messages());
    let turn = index_turns(&mut req).unwrap_or(0);
    let mut state = SessionState::new("demo");
    state.register_blocks(&req, &cfg);

    for zone in [PressureZone::Advisory, PressureZone::Involuntary, PressureZone::Aggressive] {
        let picked = select_evictions(&state.blocks, &state.fault_history, zone, turn, &cfg);
        println!("\n{zone:?} (gates {:?}) at turn {turn}: {} candidates", effective_thresholds(zone, &cfg), picked.len());
        for c in picked.iter().take(6) {
            let b = &state.blocks[c.index];
            println!(
                "  {:<14} {:>5} B  turn {:>2}  {:?} {}",
                b.block_id,
                b.size_bytes,
                b.turn,
                c.category,
                b.key_param.as_deref().unwrap_or("")
            );
        }
    }
}
