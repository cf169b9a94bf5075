//! HTTP front end.
//!
//! `POST /v1/messages` goes through the pipeline; every other path is
//! relayed untouched. Requests of one session are serialized by an owned
//! lock held from pipeline start until the response has been relayed and
//! the checkpoint written. Streamed responses are relayed event by event.

use std::collections::HashMap;
use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex as StdMutex};

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, HeaderMap, HeaderName, HeaderValue, Method, Response, StatusCode, Uri};
use axum::Router;
use futures::channel::mpsc;
use futures::StreamExt;
use serde_json::{json, Value};
use tokio::sync::{oneshot, Mutex, OwnedMutexGuard};

use crate::cooperative::{self, InterceptOutcome, StreamInterceptor};
use crate::pagestore::{checkpoint_file, checkpoint_load, checkpoint_save, SessionState};
use crate::proxy::log::DecisionLog;
use crate::proxy::pipeline::{Engine, Outcome, Prepared};
use crate::proxy::{ProxyConfig, SESSION_HEADER};
use crate::wire::SseDecoder;

pub const MESSAGES_PATH: &str = "/v1/messages";
pub const HEALTH_PATH: &str = "/pichay/health";

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("cannot open decision log {path}: {source}")]
    Log { path: PathBuf, source: std::io::Error },
    #[error("cannot open capture file {path}: {source}")]
    Capture { path: PathBuf, source: std::io::Error },
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("http client: {0}")]
    Client(#[from] reqwest::Error),
    #[error("server: {0}")]
    Serve(std::io::Error),
}

type SessionSlot = Arc<Mutex<SessionState>>;

pub struct AppState {
    pub engine: Engine,
    pub log: DecisionLog,
    client: reqwest::Client,
    sessions: StdMutex<HashMap<String, SessionSlot>>,
    capture: Option<StdMutex<std::fs::File>>,
}

impl AppState {
    pub fn new(engine: Engine) -> Result<Self, ServerError> {
        let cfg = &engine.config;
        let log = match &cfg.log_path {
            Some(p) => DecisionLog::open(p).map_err(|source| ServerError::Log { path: p.clone(), source })?,
            None => DecisionLog::disabled(),
        };
        let capture = match &cfg.capture_path {
            Some(p) => Some(StdMutex::new(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|source| ServerError::Capture { path: p.clone(), source })?,
            )),
            None => None,
        };
        let client = reqwest::Client::builder().build()?;
        Ok(AppState {
            engine,
            log,
            client,
            sessions: StdMutex::new(HashMap::new()),
            capture,
        })
    }

    fn slot(&self, id: &str) -> SessionSlot {
        let mut map = self.sessions.lock().unwrap_or_else(|p| p.into_inner());
        map.entry(id.to_string())
            .or_insert_with(|| {
                let st = match &self.engine.config.checkpoint_dir {
                    Some(dir) => checkpoint_load(&checkpoint_file(dir, id), id),
                    None => SessionState::new(id),
                };
                Arc::new(Mutex::new(st))
            })
            .clone()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().map(|m| m.len()).unwrap_or(0)
    }

    fn capture(&self, session_id: &str, raw: &[u8]) {
        let Some(f) = &self.capture else { return };
        let Ok(request) = serde_json::from_slice::<Value>(raw) else { return };
        let line = json!({"session_id": session_id, "request": request});
        let mut f = f.lock().unwrap_or_else(|p| p.into_inner());
        if let Err(e) = writeln!(f, "{line}") {
            tracing::warn!(error = %e, "capture write failed");
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .fallback(handle)
        .layer(DefaultBodyLimit::disable())
        .with_state(state)
}

/// Bind, then serve until `shutdown` resolves.
pub async fn serve(
    config: ProxyConfig,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServerError> {
    let addr = config.listen_address.clone();
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|source| ServerError::Bind { addr, source })?;
    let state = Arc::new(AppState::new(Engine::new(config))?);
    tracing::info!(addr = %listener.local_addr().map(|a| a.to_string()).unwrap_or_default(), "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(ServerError::Serve)
}

/// A server running on a background task; used by tests and examples.
pub struct RunningServer {
    pub addr: SocketAddr,
    pub state: Arc<AppState>,
    stop: Option<oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<()>,
}

impl RunningServer {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub async fn stop(mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        let _ = (&mut self.task).await;
    }
}

/// Start on `engine.config.listen_address` (port 0 picks a free port).
pub async fn spawn(engine: Engine) -> Result<RunningServer, ServerError> {
    let addr = engine.config.listen_address.clone();
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|source| ServerError::Bind { addr, source })?;
    let local = listener.local_addr().map_err(ServerError::Serve)?;
    let state = Arc::new(AppState::new(engine)?);
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(state.clone());
    let task = tokio::spawn(async move {
        let _ = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await;
    });
    Ok(RunningServer {
        addr: local,
        state,
        stop: Some(tx),
        task,
    })
}

fn is_hop_by_hop(name: &HeaderName) -> bool {
    matches!(
        name.as_str(),
        "connection"
            | "keep-alive"
            | "proxy-authenticate"
            | "proxy-authorization"
            | "te"
            | "trailer"
            | "transfer-encoding"
            | "upgrade"
    )
}

fn upstream_headers(headers: &HeaderMap) -> HeaderMap {
    let mut out = HeaderMap::new();
    for (k, v) in headers {
        if is_hop_by_hop(k) || k == header::HOST || k == header::CONTENT_LENGTH || k == header::ACCEPT_ENCODING {
            continue;
        }
        out.append(k.clone(), v.clone());
    }
    out
}

fn response_headers(headers: &HeaderMap, rewritten: bool) -> HeaderMap {
    let mut out = HeaderMap::new();
    for (k, v) in headers {
        if is_hop_by_hop(k) || (rewritten && k == header::CONTENT_LENGTH) {
            continue;
        }
        out.append(k.clone(), v.clone());
    }
    out
}

fn error_response(status: StatusCode, message: &str) -> Response<Body> {
    let body = json!({"type": "error", "error": {"type": "api_error", "message": message}});
    let mut r = Response::new(Body::from(body.to_string()));
    *r.status_mut() = status;
    r.headers_mut()
        .insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
    r
}

async fn send_upstream(
    app: &AppState,
    method: Method,
    uri: &Uri,
    headers: &HeaderMap,
    body: Vec<u8>,
) -> Result<reqwest::Response, reqwest::Error> {
    let base = app.engine.config.upstream_base_url.trim_end_matches('/');
    let path = uri.path_and_query().map(|p| p.as_str()).unwrap_or("/");
    app.client
        .request(method, format!("{base}{path}"))
        .headers(upstream_headers(headers))
        .body(body)
        .send()
        .await
}

async fn handle(State(app): State<Arc<AppState>>, method: Method, uri: Uri, headers: HeaderMap, body: Bytes) -> Response<Body> {
    if method == Method::GET && uri.path() == HEALTH_PATH {
        let h = json!({
            "sessions": app.session_count(),
            "log_records": app.log.written(),
            "log_failures": app.log.failures(),
        });
        return Response::new(Body::from(h.to_string()));
    }
    if method != Method::POST || uri.path() != MESSAGES_PATH {
        return passthrough(&app, method, &uri, &headers, body.to_vec()).await;
    }
    let header_id = headers.get(SESSION_HEADER).and_then(|v| v.to_str().ok());
    let (req, session_id) = match app.engine.parse(&body, header_id) {
        Ok(v) => v,
        Err(reason) => {
            let p = app.engine.fail_open(&body, header_id.unwrap_or("unknown"), &reason);
            app.log.append(&p.records);
            return passthrough(&app, method, &uri, &headers, body.to_vec()).await;
        }
    };
    app.capture(&session_id, &body);
    let mut guard = app.slot(&session_id).lock_owned().await;
    let prepared = app.engine.run(&body, req, &mut guard);
    app.log.append(&prepared.records);

    let upstream = match send_upstream(&app, method, &uri, &headers, prepared.forwarded.clone()).await {
        Ok(r) => r,
        Err(e) => {
            tracing::warn!(error = %e, "upstream unreachable");
            return error_response(StatusCode::BAD_GATEWAY, &format!("upstream unreachable: {e}"));
        }
    };
    relay(app, upstream, prepared, guard).await
}

async fn passthrough(app: &AppState, method: Method, uri: &Uri, headers: &HeaderMap, body: Vec<u8>) -> Response<Body> {
    match send_upstream(app, method, uri, headers, body).await {
        Ok(r) => {
            let status = r.status();
            let headers = response_headers(r.headers(), false);
            let mut out = Response::new(Body::from_stream(r.bytes_stream()));
            *out.status_mut() = status;
            *out.headers_mut() = headers;
            out
        }
        Err(e) => error_response(StatusCode::BAD_GATEWAY, &format!("upstream unreachable: {e}")),
    }
}

fn is_event_stream(headers: &HeaderMap) -> bool {
    headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("text/event-stream"))
}

fn finalize_and_log(app: &AppState, prepared: &Prepared, state: &mut SessionState, outcome: &InterceptOutcome) {
    let records = app.engine.finalize(state, prepared, outcome);
    app.log.append(&records);
}

/// Runs after the response is delivered; the caller still owns the session.
async fn checkpoint(prepared: &Prepared, state: &SessionState) {
    if prepared.outcome != Outcome::Transformed || state.checkpoint_path.is_none() {
        return;
    }
    let snapshot = state.clone();
    match tokio::task::spawn_blocking(move || checkpoint_save(&snapshot)).await {
        Ok(Ok(_)) => {}
        Ok(Err(e)) => tracing::warn!(error = %e, "checkpoint failed"),
        Err(e) => tracing::warn!(error = %e, "checkpoint task failed"),
    }
}

/// Finalize, log and checkpoint, then release the session.
fn settle(app: Arc<AppState>, prepared: Prepared, mut guard: OwnedMutexGuard<SessionState>, outcome: InterceptOutcome) {
    finalize_and_log(&app, &prepared, &mut guard, &outcome);
    tokio::spawn(async move {
        checkpoint(&prepared, &guard).await;
    });
}

async fn relay(
    app: Arc<AppState>,
    upstream: reqwest::Response,
    prepared: Prepared,
    guard: OwnedMutexGuard<SessionState>,
) -> Response<Body> {
    let status = upstream.status();
    let up_headers = upstream.headers().clone();
    let intercept = prepared.outcome == Outcome::Transformed && app.engine.config.mode.compacts() && app.engine.config.phantom_enabled;

    if !status.is_success() {
        // Errors are relayed verbatim.
        let bytes = upstream.bytes().await.unwrap_or_default();
        settle(app, prepared, guard, InterceptOutcome::default());
        let mut out = Response::new(Body::from(bytes));
        *out.status_mut() = status;
        *out.headers_mut() = response_headers(&up_headers, false);
        return out;
    }

    if !is_event_stream(&up_headers) {
        let bytes = upstream.bytes().await.unwrap_or_default();
        let mut outcome = InterceptOutcome::default();
        let mut body = bytes.to_vec();
        let mut rewritten = false;
        if intercept {
            if let Some((b, calls, usage)) = cooperative::intercept_json(&bytes) {
                body = b;
                outcome.calls = calls;
                outcome.usage = usage;
                rewritten = true;
            }
        }
        if !rewritten {
            if let Ok(v) = serde_json::from_slice::<Value>(&bytes) {
                outcome.usage = v.get("usage").and_then(Value::as_object).cloned().unwrap_or_default();
            }
        }
        settle(app, prepared, guard, outcome);
        let mut out = Response::new(Body::from(body));
        *out.status_mut() = status;
        *out.headers_mut() = response_headers(&up_headers, rewritten);
        return out;
    }

    let (tx, rx) = mpsc::unbounded::<Result<Bytes, std::io::Error>>();
    let mut stream = upstream.bytes_stream();
    tokio::spawn(async move {
        let mut decoder = SseDecoder::new();
        let mut ic = StreamInterceptor::new();
        let mut client_open = true;
        let mut send = |b: Bytes| {
            if client_open && tx.unbounded_send(Ok(b)).is_err() {
                client_open = false;
            }
        };
        while let Some(chunk) = stream.next().await {
            let chunk = match chunk {
                Ok(c) => c,
                Err(e) => {
                    tracing::warn!(error = %e, "upstream stream broke");
                    break;
                }
            };
            let events = decoder.push(&chunk);
            if intercept {
                let out: String = events.into_iter().filter_map(|e| ic.process(e)).map(|e| e.raw).collect();
                if !out.is_empty() {
                    send(Bytes::from(out));
                }
            } else {
                for e in events {
                    ic.process(e);
                }
                send(chunk);
            }
        }
        if let Some(rest) = decoder.finish() {
            if intercept {
                if let Some(e) = ic.process(rest) {
                    send(Bytes::from(e.raw));
                }
            } else {
                ic.process(rest);
            }
        }
        let outcome = ic.finish();
        let outcome = if intercept {
            outcome
        } else {
            InterceptOutcome {
                calls: Vec::new(),
                ..outcome
            }
        };
        // Log before closing the client stream; checkpoint after.
        let mut guard = guard;
        finalize_and_log(&app, &prepared, &mut guard, &outcome);
        drop(tx);
        checkpoint(&prepared, &guard).await;
    });
    let mut out = Response::new(Body::from_stream(rx));
    *out.status_mut() = status;
    *out.headers_mut() = response_headers(&up_headers, intercept);
    out
}
