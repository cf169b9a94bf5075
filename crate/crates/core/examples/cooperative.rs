//! Cleanup tags in model output and phantom tool calls in a response stream.
//!
//! cargo run --example cooperative

use pichay::cooperative::{intercept_stream, parse_cleanup_tags_detailed, OPERATIONS_HELP};
use pichay::wire::reassemble;
use pichay::wire::sse::synth;
use serde_json::json;

fn main() {
    let reply = "Done with the parser.\n\
        drop: block:3fa2c1d0-4\n\
        anchor: block:9b1e0f77-2\n\
        summarize: block:77aa01bc-5 \"test output: 212 passed\"\n\
        collapse: turns 3-8 \"explored the repo layout\"\n\
        drop: something else";
    let (directives, rejected) = parse_cleanup_tags_detailed(reply);
    for d in &directives {
        println!("directive: {d:?}");
    }
    println!("ignored: {rejected:?}\n");

    let mut events = vec![synth::message_start()];
    events.extend(synth::text_block(0, "Let me look at the old parser again."));
    events.extend(synth::tool_block(1, "toolu_9", "memory_fault", &json!({"paths": ["/src/parser.rs"]})));
    events.extend(synth::finish("tool_use"));
    let (client_view, calls) = intercept_stream(&events);
    let m = reassemble(&client_view).unwrap();
    println!("client sees {} block(s), stop_reason {:?}", m.blocks.len(), m.stop_reason);
    println!("proxy answers: {calls:?}\n");
    println!("{OPERATIONS_HELP}");
}
