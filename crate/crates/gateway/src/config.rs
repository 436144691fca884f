//! Gateway configuration file (TOML) with environment overrides for secrets.
//!
//! ```toml
//! listen_address = "127.0.0.1:8080"
//! model_artifact_path = "model.json"
//! metric = "bart_score"
//! request_timeout_ms = 30000
//! max_body_bytes = 65536
//!
//! [small_backend]
//! base_url = "http://127.0.0.1:9001"
//! api_style = "openai_chat"
//! model = "llama-2-7b"
//!
//! [large_backend]
//! base_url = "https://api.example.com"
//! api_style = "openai_chat"
//! model = "gpt-3.5-turbo"
//! ```
//!
//! `HYROUTE_SMALL_AUTH_TOKEN` and `HYROUTE_LARGE_AUTH_TOKEN` override the
//! backends' `auth_token`.

use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{GatewayError, Result};

pub const SMALL_TOKEN_ENV: &str = "HYROUTE_SMALL_AUTH_TOKEN";
pub const LARGE_TOKEN_ENV: &str = "HYROUTE_LARGE_AUTH_TOKEN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiStyle {
    /// `POST {base_url}/v1/chat/completions` with the query as one user message.
    OpenaiChat,
    /// `POST {base_url}/echo` with `{"query_text": ...}`; see [`crate::mock`].
    EchoMock,
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub base_url: String,
    pub api_style: ApiStyle,
    /// Model name sent in chat-completion requests.
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub auth_token: Option<String>,
}

impl fmt::Debug for BackendConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendConfig")
            .field("base_url", &self.base_url)
            .field("api_style", &self.api_style)
            .field("model", &self.model)
            .field("auth_token", &self.auth_token.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl BackendConfig {
    pub fn echo(base_url: impl Into<String>) -> Self {
        BackendConfig {
            base_url: base_url.into(),
            api_style: ApiStyle::EchoMock,
            model: None,
            auth_token: None,
        }
    }
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_max_body() -> usize {
    64 * 1024
}

fn default_pool() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub listen_address: String,
    pub small_backend: BackendConfig,
    pub large_backend: BackendConfig,
    pub model_artifact_path: PathBuf,
    pub metric: String,
    /// Selects a calibration entry when the artifact holds several for `metric`.
    #[serde(default)]
    pub max_drop_pct: Option<f64>,
    #[serde(default)]
    pub threshold_override: Option<f64>,
    #[serde(default = "default_timeout_ms")]
    pub request_timeout_ms: u64,
    #[serde(default = "default_max_body")]
    pub max_body_bytes: usize,
    /// Idle connections kept per backend host.
    #[serde(default = "default_pool")]
    pub pool_max_idle_per_host: usize,
    /// Route records are appended here, one JSON object per line.
    #[serde(default)]
    pub route_log_path: Option<PathBuf>,
    /// Include the query text in route records.
    #[serde(default)]
    pub log_queries: bool,
}

impl GatewayConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| GatewayError::Config(e.to_string()))
    }

    /// Reads the file, applies environment overrides, and validates.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.apply_env(|k| std::env::var(k).ok());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(t) = get(SMALL_TOKEN_ENV) {
            self.small_backend.auth_token = Some(t);
        }
        if let Some(t) = get(LARGE_TOKEN_ENV) {
            self.large_backend.auth_token = Some(t);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.listen_addr()?;
        if let Some(t) = self.threshold_override {
            if !(0.0..=1.0).contains(&t) {
                return Err(GatewayError::Config(format!("threshold_override {t} must lie in [0, 1]")));
            }
        }
        if self.request_timeout_ms == 0 {
            return Err(GatewayError::Config("request_timeout_ms must be positive".into()));
        }
        if self.max_body_bytes == 0 {
            return Err(GatewayError::Config("max_body_bytes must be positive".into()));
        }
        for (name, b) in [("small_backend", &self.small_backend), ("large_backend", &self.large_backend)] {
            if !(b.base_url.starts_with("http://") || b.base_url.starts_with("https://")) {
                return Err(GatewayError::Config(format!("{name}.base_url {:?} is not an http(s) URL", b.base_url)));
            }
        }
        if self.metric.is_empty() {
            return Err(GatewayError::Config("metric must not be empty".into()));
        }
        Ok(())
    }

    pub fn listen_addr(&self) -> Result<SocketAddr> {
        self.listen_address
            .parse()
            .map_err(|e| GatewayError::Config(format!("listen_address {:?}: {e}", self.listen_address)))
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_millis(self.request_timeout_ms)
    }
}
