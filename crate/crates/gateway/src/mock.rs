//! In-process echo backend for tests and demos.
//!
//! Answers both `POST /echo` and `POST /v1/chat/completions` with its own
//! name and counts every call it receives.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};
use tokio::task::JoinHandle;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MockBehavior {
    Ok,
    /// Every call answers 500.
    Fail,
    /// Sleeps before answering.
    Delay(Duration),
}

struct MockState {
    name: String,
    calls: AtomicU64,
    behavior: MockBehavior,
}

pub struct EchoMock {
    pub addr: SocketAddr,
    state: Arc<MockState>,
    handle: JoinHandle<()>,
}

impl EchoMock {
    pub async fn spawn(name: &str) -> std::io::Result<Self> {
        Self::spawn_with(name, MockBehavior::Ok).await
    }

    pub async fn spawn_with(name: &str, behavior: MockBehavior) -> std::io::Result<Self> {
        let state = Arc::new(MockState {
            name: name.to_string(),
            calls: AtomicU64::new(0),
            behavior,
        });
        let app = Router::new()
            .route("/echo", post(echo))
            .route("/v1/chat/completions", post(chat))
            .with_state(state.clone());
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
        let addr = listener.local_addr()?;
        let handle = tokio::spawn(async move {
            let _ = axum::serve(listener, app).await;
        });
        Ok(EchoMock { addr, state, handle })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn calls(&self) -> u64 {
        self.state.calls.load(Ordering::SeqCst)
    }
}

impl Drop for EchoMock {
    fn drop(&mut self) {
        self.handle.abort();
    }
}

async fn respond(state: &MockState) -> Result<String, StatusCode> {
    state.calls.fetch_add(1, Ordering::SeqCst);
    match state.behavior {
        MockBehavior::Ok => {}
        MockBehavior::Fail => return Err(StatusCode::INTERNAL_SERVER_ERROR),
        MockBehavior::Delay(d) => tokio::time::sleep(d).await,
    }
    Ok(state.name.clone())
}

async fn echo(State(state): State<Arc<MockState>>, Json(_body): Json<Value>) -> Result<Json<Value>, StatusCode> {
    let text = respond(&state).await?;
    Ok(Json(json!({ "response_text": text })))
}

async fn chat(State(state): State<Arc<MockState>>, Json(_body): Json<Value>) -> Result<Json<Value>, StatusCode> {
    let text = respond(&state).await?;
    Ok(Json(json!({
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
    })))
}
