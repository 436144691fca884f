//! HTTP gateway that scores each query with a trained router and forwards
//! it to exactly one of two model backends.

pub mod backend;
pub mod config;
pub mod error;
pub mod mock;
pub mod server;

pub use config::{ApiStyle, BackendConfig, GatewayConfig};
pub use error::{GatewayError, Result};
pub use server::{Gateway, GatewayOptions, RouteRecord, RouteRequest, Stats};
