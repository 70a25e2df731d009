//! HTTP service for the trace viewer.
//!
//! | route              | method | body                                     |
//! |--------------------|--------|------------------------------------------|
//! | `/api/model`       | GET    | checkpoint manifest                      |
//! | `/api/trace`       | POST   | `TraceRequest` -> trace document         |
//! | `/api/experts`     | GET    | utilization over recent requests         |
//! | `/healthz`         | GET    | `ok`                                     |

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use moemix::checkpoint::Manifest;
use moemix::trace::{
    aggregate, expert_utilization, export_trace, RoutingTrace, TraceFilter, TraceModelMeta, Utilization,
    DEFAULT_COLLAPSE_THRESHOLD,
};
use moemix::RouteSite;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::engine::{self, Loaded};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub bind: SocketAddr,
    pub model_dir: PathBuf,
    pub max_prompt_bytes: usize,
    pub max_new_limit: usize,
    pub request_timeout: Duration,
    pub history: usize,
}

impl ServeConfig {
    pub fn check(&self) -> CliResult<()> {
        if self.max_prompt_bytes == 0 {
            return Err(CliError::Usage("--max-prompt-bytes must be positive".into()));
        }
        if self.request_timeout.is_zero() {
            return Err(CliError::Usage("--timeout-ms must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRequest {
    pub prompt: String,
    #[serde(default)]
    pub max_new: usize,
    #[serde(default)]
    pub blocks: Option<Vec<usize>>,
    #[serde(default)]
    pub projections: Option<Vec<RouteSite>>,
}

#[derive(Debug, Serialize)]
pub struct ExpertsResponse {
    pub expert_names: Vec<String>,
    pub requests: usize,
    /// `null` until a request with at least one routed token has been served.
    pub utilization: Option<Utilization>,
}

struct AppState {
    model: Loaded,
    manifest: Manifest,
    max_prompt_bytes: usize,
    max_new_limit: usize,
    timeout: Duration,
    history_len: usize,
    history: Mutex<VecDeque<RoutingTrace>>,
}

#[derive(Clone)]
pub struct App(Arc<AppState>);

impl App {
    pub fn load(cfg: &ServeConfig) -> CliResult<Self> {
        let (ckpt, model) = Loaded::load(&cfg.model_dir)?;
        Ok(Self(Arc::new(AppState {
            model,
            manifest: ckpt.manifest,
            max_prompt_bytes: cfg.max_prompt_bytes,
            max_new_limit: cfg.max_new_limit,
            timeout: cfg.request_timeout,
            history_len: cfg.history,
            history: Mutex::new(VecDeque::new()),
        })))
    }

    pub fn router(self) -> Router {
        Router::new()
            .route("/api/model", get(model_info))
            .route("/api/trace", post(trace))
            .route("/api/experts", get(experts))
            .route("/healthz", get(|| async { "ok" }))
            .with_state(self)
    }

    fn remember(&self, trace: RoutingTrace) {
        if self.0.history_len == 0 {
            return;
        }
        let mut h = self.0.history.lock().expect("history lock poisoned");
        if h.len() == self.0.history_len {
            h.pop_front();
        }
        h.push_back(trace);
    }
}

pub async fn serve(cfg: ServeConfig) -> CliResult<()> {
    let app = App::load(&cfg)?;
    let listener = tokio::net::TcpListener::bind(cfg.bind)
        .await
        .map_err(|e| CliError::Usage(format!("cannot bind {}: {e}", cfg.bind)))?;
    eprintln!("serving {} on http://{}", cfg.model_dir.display(), cfg.bind);
    axum::serve(listener, app.router())
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::io("<server>", e))
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn engine_error(e: moemix::Error) -> Response {
    use moemix::Error as E;
    let status = match &e {
        E::InvalidFilter(_) | E::TokenOutOfVocab { .. } | E::EmptyInput(_) => StatusCode::BAD_REQUEST,
        E::ModeMismatch { .. } => StatusCode::UNPROCESSABLE_ENTITY,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    };
    error(status, e.to_string())
}

async fn model_info(State(app): State<App>) -> Json<Manifest> {
    Json(app.0.manifest.clone())
}

async fn trace(State(app): State<App>, body: Bytes) -> Response {
    let req: TraceRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid request body: {e}")),
    };
    if req.prompt.len() > app.0.max_prompt_bytes {
        return error(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("prompt is {} bytes, limit {}", req.prompt.len(), app.0.max_prompt_bytes),
        );
    }
    if req.max_new > app.0.max_new_limit {
        return error(
            StatusCode::BAD_REQUEST,
            format!("max_new {} exceeds limit {}", req.max_new, app.0.max_new_limit),
        );
    }
    let model = match app.0.model.routed() {
        Ok(_) => app.clone(),
        Err(e) => return engine_error(e),
    };
    let filter = TraceFilter {
        blocks: req.blocks.map(|b| b.into_iter().collect()),
        projections: req.projections.map(|p| p.into_iter().collect()),
    };

    let job = tokio::task::spawn_blocking(move || -> moemix::Result<_> {
        let m = model.0.model.routed()?;
        filter.check(&TraceModelMeta::of(m))?;
        let trace = engine::routing_trace(m, &req.prompt, req.max_new)?;
        let summaries = aggregate(&trace, &filter)?;
        let doc = export_trace(&trace, summaries, DEFAULT_COLLAPSE_THRESHOLD)?;
        Ok((trace, doc))
    });
    match tokio::time::timeout(app.0.timeout, job).await {
        Err(_) => error(StatusCode::SERVICE_UNAVAILABLE, "trace computation timed out"),
        Ok(Err(join)) => error(StatusCode::INTERNAL_SERVER_ERROR, join.to_string()),
        Ok(Ok(Err(e))) => engine_error(e),
        Ok(Ok(Ok((trace, doc)))) => {
            app.remember(trace);
            (
                [(axum::http::header::CONTENT_TYPE, "application/json")],
                doc.to_json(),
            )
                .into_response()
        }
    }
}

/// Concatenates traces into one, renumbering token indices.
fn merge(traces: &VecDeque<RoutingTrace>) -> Option<RoutingTrace> {
    let first = traces.front()?;
    let mut merged = RoutingTrace {
        tokens: vec![],
        decisions: vec![],
        model: first.model.clone(),
    };
    for t in traces {
        let offset = merged.tokens.len();
        merged.tokens.extend(t.tokens.iter().cloned());
        merged.decisions.extend(t.decisions.iter().cloned().map(|mut d| {
            d.token_index += offset;
            d
        }));
    }
    Some(merged)
}

async fn experts(State(app): State<App>) -> Response {
    let names = app.0.manifest.moe.as_ref().map(|m| m.expert_names.clone()).unwrap_or_default();
    let (requests, merged) = {
        let h = app.0.history.lock().expect("history lock poisoned");
        (h.len(), merge(&h))
    };
    let utilization = match merged {
        Some(t) if !t.decisions.is_empty() => match expert_utilization(&t, DEFAULT_COLLAPSE_THRESHOLD) {
            Ok(u) => Some(u),
            Err(e) => return engine_error(e),
        },
        _ => None,
    };
    Json(ExpertsResponse {
        expert_names: names,
        requests,
        utilization,
    })
    .into_response()
}
