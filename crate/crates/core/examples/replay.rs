//! Offline replay: eviction and fault counts over synthetic sessions, plus
//! a comparison with classic replacement policies.
//!
//! cargo run --release --example replay

use pichay::analytics::refsim::{reference_string, simulate, Replacement};
use pichay::analytics::synth::{fault_suite, gc_only_suite, session_a};
use pichay::analytics::{replay, ReplayOptions};
use pichay::PolicyConfig;

fn main() {
    let opts = ReplayOptions::default();
    let a = replay(&[session_a()], &opts);
    println!(
        "session A: {} evictions ({} gc, {} paged), {} fault(s), paged rate {:?}",
        a.total_evictions, a.gc_evictions, a.paged_evictions, a.faults, a.fault_rate_paged
    );

    let suite = fault_suite();
    let r = replay(&suite, &opts);
    println!(
        "suite of {}: {} evictions, {} faults, rate {:.4}%",
        r.sessions,
        r.total_evictions,
        r.faults,
        r.fault_rate_total.unwrap_or(0.0) * 100.0
    );

    let gc = replay(&gc_only_suite(3, 20), &opts);
    println!("gc-only: {} evictions, paged rate {:?}", gc.total_evictions, gc.fault_rate_paged);

    let refs = reference_string(&suite[0], &PolicyConfig::default());
    for cap in [5, 10, 20] {
        let row: Vec<String> = [Replacement::Fifo, Replacement::Lru, Replacement::Min]
            .iter()
            .map(|p| format!("{p:?}={}", simulate(&refs, cap, *p).faults))
            .collect();
        println!("capacity {cap:>2}: {}", row.join(" "));
    }
}
