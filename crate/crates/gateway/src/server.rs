//! The HTTP routing service.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::future::Future;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use hyroute_core::policy::decide_learned;
use hyroute_core::{RouterModel, Target};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;

use crate::backend::{Backend, BackendFailure};
use crate::config::{BackendConfig, GatewayConfig};
use crate::error::{GatewayError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    BackendError,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub request_id: String,
    pub score: f64,
    pub threshold: f64,
    pub target: Target,
    pub backend_latency_ms: f64,
    pub outcome: Outcome,
}

/// One line of the route log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteLogEntry {
    #[serde(flatten)]
    pub record: RouteRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_text: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct RouteRequest {
    pub query_text: String,
    #[serde(default)]
    pub embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteResponse {
    pub response_text: String,
    pub routing: RouteRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteErrorResponse {
    pub error: String,
    pub routing: RouteRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DryRunResponse {
    pub score: f64,
    pub target: Target,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub requests_total: u64,
    pub routed_small: u64,
    pub routed_large: u64,
    pub realized_cost_advantage_pct: Option<f64>,
    pub error_counts: BTreeMap<String, u64>,
}

#[derive(Default)]
struct Counters {
    small: AtomicU64,
    large: AtomicU64,
    bad_request: AtomicU64,
    payload_too_large: AtomicU64,
    backend_error: AtomicU64,
    timeout: AtomicU64,
}

#[derive(Debug, Clone)]
pub struct GatewayOptions {
    pub request_timeout: Duration,
    pub max_body_bytes: usize,
    pub pool_max_idle_per_host: usize,
    pub log_queries: bool,
}

impl Default for GatewayOptions {
    fn default() -> Self {
        GatewayOptions {
            request_timeout: Duration::from_secs(30),
            max_body_bytes: 64 * 1024,
            pool_max_idle_per_host: 32,
            log_queries: false,
        }
    }
}

pub struct Gateway {
    model: Arc<RouterModel>,
    threshold: f64,
    small: Backend,
    large: Backend,
    opts: GatewayOptions,
    counters: Counters,
    seq: AtomicU64,
    log: Option<Mutex<File>>,
}

/// Threshold from the override, else from the artifact's calibration table.
pub fn resolve_threshold(
    model: &RouterModel,
    metric: &str,
    max_drop_pct: Option<f64>,
    threshold_override: Option<f64>,
) -> Result<f64> {
    if let Some(t) = threshold_override {
        return Ok(t);
    }
    model
        .threshold_for(metric, max_drop_pct)
        .map(|e| e.threshold)
        .ok_or_else(|| {
            GatewayError::Config(format!(
                "model has no calibrated threshold for metric {metric:?}{}; run calibrate or set threshold_override",
                max_drop_pct.map(|d| format!(" at max_drop_pct {d}")).unwrap_or_default()
            ))
        })
}

impl Gateway {
    pub fn new(
        model: RouterModel,
        threshold: f64,
        small: BackendConfig,
        large: BackendConfig,
        opts: GatewayOptions,
    ) -> Result<Self> {
        model.validate()?;
        if threshold.is_nan() {
            return Err(GatewayError::Config("threshold must not be NaN".into()));
        }
        let client = reqwest::Client::builder()
            .pool_max_idle_per_host(opts.pool_max_idle_per_host)
            .build()?;
        Ok(Gateway {
            model: Arc::new(model),
            threshold,
            small: Backend::new(small, client.clone()),
            large: Backend::new(large, client),
            opts,
            counters: Counters::default(),
            seq: AtomicU64::new(0),
            log: None,
        })
    }

    pub fn from_config(cfg: &GatewayConfig) -> Result<Self> {
        cfg.validate()?;
        let model = RouterModel::load(&cfg.model_artifact_path)?;
        let threshold = resolve_threshold(&model, &cfg.metric, cfg.max_drop_pct, cfg.threshold_override)?;
        let opts = GatewayOptions {
            request_timeout: cfg.request_timeout(),
            max_body_bytes: cfg.max_body_bytes,
            pool_max_idle_per_host: cfg.pool_max_idle_per_host,
            log_queries: cfg.log_queries,
        };
        let gw = Gateway::new(model, threshold, cfg.small_backend.clone(), cfg.large_backend.clone(), opts)?;
        match &cfg.route_log_path {
            Some(p) => gw.with_route_log(p),
            None => Ok(gw),
        }
    }

    /// Appends route records to `path`, creating it if needed.
    pub fn with_route_log(mut self, path: impl AsRef<Path>) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path.as_ref())?;
        self.log = Some(Mutex::new(f));
        Ok(self)
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn model(&self) -> &RouterModel {
        &self.model
    }

    /// Scores and decides without contacting a backend.
    pub fn dry_run(&self, req: &RouteRequest) -> Result<DryRunResponse> {
        let score = self.model.score_input(&req.query_text, req.embedding.as_deref())?;
        Ok(DryRunResponse {
            score,
            target: decide_learned(self.threshold, score),
            threshold: self.threshold,
        })
    }

    pub async fn handle_route(&self, req: &RouteRequest) -> Result<std::result::Result<RouteResponse, RouteErrorResponse>> {
        let d = self.dry_run(req)?;
        let (backend, counter) = match d.target {
            Target::Small => (&self.small, &self.counters.small),
            Target::Large => (&self.large, &self.counters.large),
        };
        counter.fetch_add(1, Ordering::SeqCst);
        let request_id = format!("req-{}", self.seq.fetch_add(1, Ordering::SeqCst));
        let started = Instant::now();
        let result = backend.complete(&req.query_text, self.opts.request_timeout).await;
        let backend_latency_ms = started.elapsed().as_secs_f64() * 1e3;
        let outcome = match &result {
            Ok(_) => Outcome::Ok,
            Err(BackendFailure::Timeout) => Outcome::Timeout,
            Err(BackendFailure::Error(_)) => Outcome::BackendError,
        };
        let record = RouteRecord {
            request_id,
            score: d.score,
            threshold: d.threshold,
            target: d.target,
            backend_latency_ms,
            outcome,
        };
        self.append_log(&record, &req.query_text);
        Ok(match result {
            Ok(response_text) => Ok(RouteResponse {
                response_text,
                routing: record,
            }),
            Err(f) => {
                let error = match f {
                    BackendFailure::Timeout => {
                        self.counters.timeout.fetch_add(1, Ordering::SeqCst);
                        format!("{} backend timed out", d.target)
                    }
                    BackendFailure::Error(e) => {
                        self.counters.backend_error.fetch_add(1, Ordering::SeqCst);
                        format!("{} backend failed: {e}", d.target)
                    }
                };
                tracing::warn!(request_id = %record.request_id, %error, "backend call failed");
                Err(RouteErrorResponse { error, routing: record })
            }
        })
    }

    fn append_log(&self, record: &RouteRecord, query: &str) {
        let Some(log) = &self.log else { return };
        let entry = RouteLogEntry {
            record: record.clone(),
            query_text: self.opts.log_queries.then(|| query.to_string()),
        };
        let mut line = serde_json::to_vec(&entry).expect("route records serialize");
        line.push(b'\n');
        let mut f = log.lock().unwrap_or_else(|p| p.into_inner());
        if let Err(e) = f.write_all(&line) {
            tracing::error!("route log write failed: {e}");
        }
    }

    pub fn stats(&self) -> Stats {
        let routed_small = self.counters.small.load(Ordering::SeqCst);
        let routed_large = self.counters.large.load(Ordering::SeqCst);
        let requests_total = routed_small + routed_large;
        let error_counts = [
            ("bad_request", &self.counters.bad_request),
            ("payload_too_large", &self.counters.payload_too_large),
            ("backend_error", &self.counters.backend_error),
            ("timeout", &self.counters.timeout),
        ]
        .into_iter()
        .map(|(k, c)| (k.to_string(), c.load(Ordering::SeqCst)))
        .collect();
        Stats {
            requests_total,
            routed_small,
            routed_large,
            realized_cost_advantage_pct: (requests_total > 0)
                .then(|| 100.0 * routed_small as f64 / requests_total as f64),
            error_counts,
        }
    }

    fn parse_request(&self, body: std::result::Result<Bytes, BytesRejection>) -> std::result::Result<RouteRequest, Response> {
        let body = match body {
            Ok(b) => b,
            Err(rej) if rej.status() == StatusCode::PAYLOAD_TOO_LARGE => {
                self.counters.payload_too_large.fetch_add(1, Ordering::SeqCst);
                return Err(error_response(StatusCode::PAYLOAD_TOO_LARGE, "request body too large"));
            }
            Err(rej) => {
                self.counters.bad_request.fetch_add(1, Ordering::SeqCst);
                return Err(error_response(rej.status(), &rej.body_text()));
            }
        };
        serde_json::from_slice(&body).map_err(|e| {
            self.counters.bad_request.fetch_add(1, Ordering::SeqCst);
            error_response(StatusCode::BAD_REQUEST, &format!("invalid request body: {e}"))
        })
    }

    fn input_error(&self, e: GatewayError) -> Response {
        self.counters.bad_request.fetch_add(1, Ordering::SeqCst);
        error_response(StatusCode::BAD_REQUEST, &e.to_string())
    }
}

fn error_response(status: StatusCode, msg: &str) -> Response {
    (status, Json(json!({ "error": msg }))).into_response()
}

async fn route_handler(
    State(gw): State<Arc<Gateway>>,
    body: std::result::Result<Bytes, BytesRejection>,
) -> Response {
    let req = match gw.parse_request(body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    match gw.handle_route(&req).await {
        Err(e) => gw.input_error(e),
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(err)) => {
            let status = match err.routing.outcome {
                Outcome::Timeout => StatusCode::GATEWAY_TIMEOUT,
                _ => StatusCode::BAD_GATEWAY,
            };
            (status, Json(err)).into_response()
        }
    }
}

async fn dry_run_handler(
    State(gw): State<Arc<Gateway>>,
    body: std::result::Result<Bytes, BytesRejection>,
) -> Response {
    let req = match gw.parse_request(body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    match gw.dry_run(&req) {
        Ok(d) => Json(d).into_response(),
        Err(e) => gw.input_error(e),
    }
}

async fn stats_handler(State(gw): State<Arc<Gateway>>) -> Json<Stats> {
    Json(gw.stats())
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

pub fn router(gw: Arc<Gateway>) -> Router {
    let limit = gw.opts.max_body_bytes;
    Router::new()
        .route("/v1/route", post(route_handler))
        .route("/v1/dry-run", post(dry_run_handler))
        .route("/v1/stats", get(stats_handler))
        .route("/healthz", get(healthz))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(gw)
}

/// Serves until `shutdown` resolves, then drains in-flight requests.
pub async fn serve(
    gw: Arc<Gateway>,
    listener: TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<()> {
    tracing::info!(addr = ?listener.local_addr().ok(), threshold = gw.threshold, "gateway listening");
    axum::serve(listener, router(gw)).with_graceful_shutdown(shutdown).await?;
    Ok(())
}
