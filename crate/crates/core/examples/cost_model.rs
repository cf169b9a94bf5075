//! Break-even, pin decay and the cumulative cost curve of a growing session.
//!
//! cargo run --release --example cost_model

use pichay::analytics::synth::growing_workload;
use pichay::analytics::{cost_curve, request_sizes};
use pichay::policy::{break_even, pin_strength, quadratic_fault_cost};
use pichay::proxy::{Engine, ProxyConfig};
use pichay::{PolicyConfig, PressureZone};

fn main() {
    let e = break_even(5_000, Some(20));
    println!("5,000-token page, next use in 20 turns: keep {} fault {} -> {:?}, saves {}", e.keep_cost, e.fault_cost, e.decision, e.savings());
    for h in [0, 1, 2] {
        println!("  horizon {h}: {:?}", break_even(5_000, Some(h)).decision);
    }
    println!("quadratic fault cost, 100K context + 5K page: {:.0}", quadratic_fault_cost(100_000, 5_000));

    let cfg = PolicyConfig::default();
    for dt in [0, 4, 8, 16, 24] {
        println!("pin strength after {dt:>2} idle turns: {:.3}", pin_strength(0, dt, &cfg));
    }

    let t = growing_workload(88);
    let engine = Engine::new(ProxyConfig::default()).with_zone(PressureZone::Involuntary);
    let (base, managed) = request_sizes(&t, &engine);
    let c = cost_curve(&base, &managed).unwrap();
    println!(
        "\n88-turn workload: cumulative reduction {:.1}%, mean per-request {:.1}%, final request {:.1}%",
        c.reduction * 100.0,
        c.mean_per_turn_reduction * 100.0,
        c.final_turn_reduction * 100.0
    );
    for p in c.points.iter().step_by(40) {
        println!("  request {:>3}: {:>8} B vs {:>8} B", p.turn, p.baseline, p.managed);
    }
}
