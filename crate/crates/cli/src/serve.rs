use std::io::Write;
use std::sync::Arc;

use anyhow::{Context, Result};
use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use regkit_core::embedding::Embedder;
use regkit_core::harness::{PipelineState, Retriever};
use regkit_core::index::VectorIndex;
use regkit_core::rerank::Scorer;
use regkit_core::Error;

use crate::config::{build_embedder, build_scorer, Config};
use crate::ServeArgs;

struct AppState {
    index: VectorIndex,
    embedder: Box<dyn Embedder>,
    scorer: Box<dyn Scorer>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RetrieveRequest {
    question: String,
    #[serde(default = "default_k")]
    k: usize,
    #[serde(default)]
    rerank: bool,
}

fn default_k() -> usize {
    5
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn retrieve(State(app): State<Arc<AppState>>, body: Result<Json<RetrieveRequest>, JsonRejection>) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    if req.question.trim().is_empty() {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "question must not be empty");
    }
    if req.k == 0 {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "k must be at least 1");
    }
    let result = tokio::task::spawn_blocking(move || {
        let retriever = Retriever::new(&app.index, app.embedder.as_ref(), app.scorer.as_ref());
        retriever.answer_retrieve(&req.question, req.k, req.rerank)
    })
    .await;
    match result {
        Ok(Ok(answer)) => Json(answer).into_response(),
        Ok(Err(Error::EmptyIndex)) => error(StatusCode::SERVICE_UNAVAILABLE, "index is empty"),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

fn router(state: Arc<AppState>) -> Router {
    Router::new().route("/health", get(health)).route("/retrieve", post(retrieve)).with_state(state)
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}

pub fn run(config: &Config, a: ServeArgs) -> Result<()> {
    let state = PipelineState::load(&a.state)?;
    let app = Arc::new(AppState {
        index: state.index,
        embedder: build_embedder(&config.embedder)?,
        scorer: build_scorer(&config.scorer)?,
    });
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener =
            tokio::net::TcpListener::bind(&a.bind).await.with_context(|| format!("binding {}", a.bind))?;
        let addr = listener.local_addr()?;
        println!("listening on {addr}");
        std::io::stdout().flush()?;
        axum::serve(listener, router(app)).with_graceful_shutdown(shutdown_signal()).await?;
        eprintln!("shut down");
        Ok(())
    })
}
