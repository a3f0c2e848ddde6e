//! HTTP surface of the broker.

use std::future::Future;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::Value;
use tokio::net::TcpListener;

use crate::state::{ApiError, Broker};

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.body())).into_response()
    }
}

type Reply = Result<Json<Value>, ApiError>;

/// Runs blocking broker work (planning, log writes) off the async workers.
async fn blocking<F>(broker: Arc<Broker>, f: F) -> Reply
where
    F: FnOnce(&Broker) -> Result<Value, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&broker))
        .await
        .map_err(|e| ApiError {
            status: 500,
            code: "internal",
            message: e.to_string(),
        })?
        .map(Json)
}

async fn put_index(State(b): State<Arc<Broker>>, body: String) -> Reply {
    blocking(b, move |b| b.put_index(&body)).await
}

async fn get_index(State(b): State<Arc<Broker>>) -> Reply {
    b.get_index().map(Json)
}

async fn submit(State(b): State<Arc<Broker>>, body: String) -> Reply {
    blocking(b, move |b| b.submit_request(&body)).await
}

async fn get_plan(State(b): State<Arc<Broker>>, Path(id): Path<String>) -> Reply {
    b.get_plan(&id).map(Json)
}

async fn replan(State(b): State<Arc<Broker>>, Path(id): Path<String>) -> Reply {
    blocking(b, move |b| b.replan(&id)).await
}

async fn get_front(State(b): State<Arc<Broker>>, Path(id): Path<String>) -> Reply {
    b.get_front(&id).map(Json)
}

async fn healthz(State(b): State<Arc<Broker>>) -> Json<Value> {
    Json(b.health())
}

pub fn router(broker: Arc<Broker>) -> Router {
    Router::new()
        .route("/index", get(get_index).put(put_index))
        .route("/requests", post(submit))
        .route("/plans/{request_id}", get(get_plan))
        .route("/plans/{request_id}/replan", post(replan))
        .route("/fronts/{front_id}", get(get_front))
        .route("/healthz", get(healthz))
        .with_state(broker)
}

/// Serves until `shutdown` resolves, then flushes the log.
pub async fn serve<F>(
    listener: TcpListener,
    broker: Arc<Broker>,
    shutdown: F,
) -> std::io::Result<()>
where
    F: Future<Output = ()> + Send + 'static,
{
    axum::serve(listener, router(broker.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    broker.sync()
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
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
    tracing::info!("shutting down");
}
