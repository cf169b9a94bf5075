//! Rendering and parsing retrieval handles.
//!
//! cargo run --example handles

use pichay::handles::{parse_handle, render_cleaned, render_paged, HANDLE_BUDGET};

fn main() {
    let long = render_paged("Read", "/path/to/file.py", 8_192, Some(187));
    println!("{long}");
    println!("{}", render_cleaned("Bash", 2_048));

    let deep = format!("/{}", "very/deep/".repeat(400));
    let squeezed = render_paged("Read", &deep, 12_450, Some(287));
    println!("{squeezed}\n  ({} bytes, budget {HANDLE_BUDGET})", squeezed.len());

    let h = parse_handle(&long).expect("round trip");
    println!("parsed: tool={} key={} size={} lines={:?}", h.tool_name, h.key_param, h.size_bytes, h.line_count);
}
