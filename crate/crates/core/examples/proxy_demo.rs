//! The proxy over HTTP in front of a stand-in upstream, printing what it
//! forwarded and logged.
//!
//! cargo run --example proxy_demo

use axum::body::Bytes;
use axum::Router;
use serde_json::json;

use pichay::analytics::synth::session_a;
use pichay::proxy::server::spawn;
use pichay::proxy::{Engine, ProxyConfig};
use pichay::PressureZone;

#[tokio::main]
async fn main() {
    // Upstream that reports the size of what it received.
    let upstream = Router::new().fallback(|body: Bytes| async move {
        axum::Json(json!({"type": "message", "role": "assistant", "stop_reason": "end_turn",
            "content": [{"type": "text", "text": format!("upstream got {} bytes", body.len())}],
            "usage": {"input_tokens": body.len() / 4, "output_tokens": 5}}))
    });
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let upstream_url = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(async move { axum::serve(listener, upstream).await });

    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("decisions.jsonl");
    let cfg = ProxyConfig {
        listen_address: "127.0.0.1:0".into(),
        upstream_base_url: upstream_url,
        log_path: Some(log.clone()),
        ..Default::default()
    };
    let proxy = spawn(Engine::new(cfg).with_zone(PressureZone::Involuntary)).await.unwrap();

    let body = serde_json::to_vec(&json!({"model": "m", "max_tokens": 64, "messages": session_a().messages()})).unwrap();
    let resp = reqwest::Client::new()
        .post(format!("{}/v1/messages", proxy.url()))
        .header("content-type", "application/json")
        .header("x-session-id", "demo")
        .body(body.clone())
        .send()
        .await
        .unwrap();
    let text = resp.text().await.unwrap();
    println!("client sent {} bytes; reply: {text}", body.len());
    proxy.stop().await;

    for r in pichay::proxy::log::read_log(&log).unwrap() {
        println!("{:<8} {:<28} {:>7}  {}", format!("{:?}", r.action), r.subject, r.bytes_delta, r.detail);
    }
}
