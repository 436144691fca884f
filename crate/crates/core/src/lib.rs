//! Cost-aware routing between a small and a large language model.
//!
//! The pipeline: load a corpus of queries with sampled response qualities
//! ([`dataset`]), turn quality gaps into training labels ([`labeling`]),
//! fit a probabilistic router ([`router`]), calibrate a routing threshold
//! ([`policy`]) and measure the cost/quality tradeoff ([`evaluation`]).
//!
//! With the default `parallel` feature the data-parallel loops run on
//! rayon; see [`exec::Exec`].

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod labeling;
pub mod policy;
pub mod router;
pub mod synth;

pub use dataset::{Dataset, QualitySamples, QuerySample, Split};
pub use error::{Error, Result};
pub use exec::Exec;
pub use labeling::{LabelScheme, LabeledExample, SchemeKind};
pub use policy::{RoutingDecision, RoutingPolicy, Target};
pub use router::{Features, FeaturizerConfig, RouterModel, TrainConfig};
