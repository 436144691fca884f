//! Outbound calls to the small and large model endpoints.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{ApiStyle, BackendConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum BackendFailure {
    Timeout,
    Error(String),
}

#[derive(Serialize, Deserialize)]
pub struct EchoRequest {
    pub query_text: String,
}

#[derive(Serialize, Deserialize)]
pub struct EchoResponse {
    pub response_text: String,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Backend {
    cfg: BackendConfig,
    client: reqwest::Client,
}

impl Backend {
    pub fn new(cfg: BackendConfig, client: reqwest::Client) -> Self {
        Backend { cfg, client }
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.cfg.base_url.trim_end_matches('/'))
    }

    /// Sends one query and returns the response text.
    pub async fn complete(&self, query: &str, timeout: Duration) -> Result<String, BackendFailure> {
        let req = match self.cfg.api_style {
            ApiStyle::OpenaiChat => self.client.post(self.url("/v1/chat/completions")).json(&json!({
                "model": self.cfg.model.as_deref().unwrap_or("default"),
                "messages": [{"role": "user", "content": query}],
            })),
            ApiStyle::EchoMock => self.client.post(self.url("/echo")).json(&EchoRequest {
                query_text: query.to_string(),
            }),
        };
        let req = match &self.cfg.auth_token {
            Some(t) => req.bearer_auth(t),
            None => req,
        };
        let resp = req.timeout(timeout).send().await.map_err(classify)?;
        let status = resp.status();
        if !status.is_success() {
            return Err(BackendFailure::Error(format!("backend returned {status}")));
        }
        match self.cfg.api_style {
            ApiStyle::OpenaiChat => {
                let body: ChatResponse = resp.json().await.map_err(classify)?;
                body.choices
                    .into_iter()
                    .next()
                    .and_then(|c| c.message.content)
                    .ok_or_else(|| BackendFailure::Error("chat response has no message content".into()))
            }
            ApiStyle::EchoMock => {
                let body: EchoResponse = resp.json().await.map_err(classify)?;
                Ok(body.response_text)
            }
        }
    }
}

fn classify(e: reqwest::Error) -> BackendFailure {
    if e.is_timeout() {
        BackendFailure::Timeout
    } else {
        BackendFailure::Error(e.to_string())
    }
}
