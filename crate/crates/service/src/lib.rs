//! Interactive rollout server.
//!
//! `POST /sessions` starts a closed-loop episode that pauses at the start of
//! every subtask until an instruction arrives on `/sessions/{id}/stream`.
//! The world clock does not run while a session waits, so the resulting
//! report depends only on the instructions chosen, never on their timing.

pub mod protocol;
pub mod session;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use serde_json::json;
use switchfold::pipeline::Model;
use tokio::net::TcpListener;
use tokio::sync::mpsc;

use crate::protocol::{ClientMessage, ServerMessage, SessionCreated, StartRequest};
use crate::session::{EpisodeRequest, SessionConfig, SessionError, SessionManager};

pub use crate::session::Phase;

type AppState = Arc<SessionManager>;

/// Builds the router over a shared session manager.
pub fn router(manager: Arc<SessionManager>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/stream", get(stream))
        .with_state(manager)
}

async fn health(State(manager): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "sessions": manager.len() }))
}

fn error_response(status: StatusCode, message: String) -> Response {
    (status, Json(ServerMessage::error(message))).into_response()
}

async fn create_session(State(manager): State<AppState>, body: Result<Json<StartRequest>, axum::extract::rejection::JsonRejection>) -> Response {
    let Json(request) = match body {
        Ok(b) => b,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, e.body_text()),
    };
    match EpisodeRequest::try_from(&request) {
        Ok(req) => {
            let session = manager.create(req);
            tracing::info!(id = session.id, position = request.position, pattern = ?request.pattern, "session started");
            (StatusCode::CREATED, Json(SessionCreated { id: session.id })).into_response()
        }
        Err(e) => error_response(StatusCode::BAD_REQUEST, e.to_string()),
    }
}

async fn stream(
    State(manager): State<AppState>,
    Path(id): Path<u64>,
    ws: Result<WebSocketUpgrade, axum::extract::ws::rejection::WebSocketUpgradeRejection>,
) -> Response {
    // Unknown ids are 404 whether or not the request is a proper upgrade.
    if let Err(e) = manager.get(id) {
        return error_response(StatusCode::NOT_FOUND, e.to_string());
    }
    match ws {
        Ok(ws) => ws.on_upgrade(move |socket| client_loop(manager, id, socket)),
        Err(rejection) => rejection.into_response(),
    }
}

async fn client_loop(manager: AppState, id: u64, socket: WebSocket) {
    let Ok(session) = manager.get(id) else { return };
    let (mut sink, mut incoming) = socket.split();
    let (tx, mut rx) = mpsc::unbounded_channel::<ServerMessage>();
    let client = session.attach(tx.clone());
    let writer = tokio::spawn(async move {
        while let Some(msg) = rx.recv().await {
            if sink.send(Message::Text(msg.to_json().into())).await.is_err() {
                break;
            }
        }
    });
    while let Some(Ok(frame)) = incoming.next().await {
        let text = match frame {
            Message::Text(t) => t,
            Message::Close(_) => break,
            _ => continue,
        };
        let reply = match serde_json::from_str::<ClientMessage>(&text) {
            Err(e) => Err(SessionError::Invalid(format!("bad message: {e}"))),
            Ok(ClientMessage::Instruct { signal }) => session.instruct(signal),
            Ok(ClientMessage::Start { pattern, position, seed }) => {
                EpisodeRequest::parse(position, pattern, seed).and_then(|req| manager.restart(&session, req))
            }
        };
        if let Err(e) = reply {
            let _ = tx.send(ServerMessage::error(e.to_string()));
        }
    }
    session.detach(client);
    drop(tx);
    writer.abort();
}

/// Periodically drops sessions whose clients have been gone too long.
pub fn spawn_reaper(manager: Arc<SessionManager>) -> tokio::task::JoinHandle<()> {
    let period = (manager.config().reconnect_timeout / 4).clamp(Duration::from_millis(50), Duration::from_secs(5));
    tokio::spawn(async move {
        let mut ticker = tokio::time::interval(period);
        loop {
            ticker.tick().await;
            for id in manager.reap(Instant::now()) {
                tracing::info!(id, "session expired");
            }
        }
    })
}

/// Binds and serves until the process is stopped. Returns the bound address
/// through `on_bound` before accepting connections.
pub async fn serve(model: Model, config: SessionConfig, addr: SocketAddr, on_bound: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let manager = Arc::new(SessionManager::new(Arc::new(model), config));
    let listener = TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    let reaper = spawn_reaper(manager.clone());
    let result = axum::serve(listener, router(manager)).await;
    reaper.abort();
    result
}
