//! Query corpus schema and newline-delimited JSON loading.
//!
//! A dataset file holds one JSON object per line. The first line may be a
//! header of the form `{"meta": {"embedding_dim": 768, "metrics": ["bart_score"]}}`;
//! every other line is a [`QuerySample`].

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

/// Quality values of independently sampled responses for one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QualitySamples(pub Vec<f64>);

impl QualitySamples {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }

    fn validate(&self, id: &str, side: &str, metric: &str) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Schema(format!(
                "sample {id:?}: {side} metric {metric:?} has no quality values"
            )));
        }
        if let Some(v) = self.0.iter().find(|v| !v.is_finite()) {
            return Err(Error::Schema(format!(
                "sample {id:?}: {side} metric {metric:?} has non-finite value {v}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySample {
    pub id: String,
    pub query_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    pub small: BTreeMap<String, QualitySamples>,
    pub large: BTreeMap<String, QualitySamples>,
    pub split: Split,
    /// Response texts are carried along but never read by any computation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub small_responses: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub large_responses: Option<Vec<String>>,
}

impl QuerySample {
    /// Quality samples of (small, large) for `metric`.
    pub fn pair(&self, metric: &str) -> Result<(&[f64], &[f64])> {
        match (self.small.get(metric), self.large.get(metric)) {
            (Some(s), Some(l)) => Ok((s.values(), l.values())),
            _ => Err(Error::Schema(format!(
                "sample {:?} is missing metric {metric:?}",
                self.id
            ))),
        }
    }

    /// Per-query mean quality of (small, large) for `metric`.
    pub fn mean_pair(&self, metric: &str) -> Result<(f64, f64)> {
        let (s, l) = self.pair(metric)?;
        Ok((mean(s), mean(l)))
    }
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_dim: Option<usize>,
    #[serde(default)]
    pub metrics: Vec<String>,
}

#[derive(Deserialize)]
struct HeaderLine {
    meta: DatasetMeta,
}

#[derive(Serialize)]
struct HeaderLineRef<'a> {
    meta: &'a DatasetMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<QuerySample>,
    pub embedding_dim: Option<usize>,
    pub declared_metrics: BTreeSet<String>,
}

impl Dataset {
    /// Builds a dataset and checks every invariant.
    pub fn new(
        samples: Vec<QuerySample>,
        embedding_dim: Option<usize>,
        declared_metrics: BTreeSet<String>,
    ) -> Result<Self> {
        let ds = Dataset {
            samples,
            embedding_dim,
            declared_metrics,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == Some(0) {
            return Err(Error::Schema("embedding_dim must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(self.samples.len());
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Schema(format!("duplicate sample id {:?}", s.id)));
            }
            validate_sample(s, self.embedding_dim, &self.declared_metrics)?;
        }
        Ok(())
    }

    pub fn split_view(&self, split: Split) -> Vec<&QuerySample> {
        split_view(&self.samples, split)
    }

    /// Owned copy of one split.
    pub fn split(&self, split: Split) -> Vec<QuerySample> {
        self.samples
            .iter()
            .filter(|s| s.split == split)
            .cloned()
            .collect()
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            embedding_dim: self.embedding_dim,
            metrics: self.declared_metrics.iter().cloned().collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>, expected_metrics: Option<&BTreeSet<String>>) -> Result<Self> {
        load_dataset(path, expected_metrics)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let meta = self.meta();
        serde_json::to_writer(&mut *w, &HeaderLineRef { meta: &meta })?;
        w.write_all(b"\n")?;
        for s in &self.samples {
            serde_json::to_writer(&mut *w, s)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn validate_sample(
    s: &QuerySample,
    embedding_dim: Option<usize>,
    declared: &BTreeSet<String>,
) -> Result<()> {
    for metric in declared {
        if !s.small.contains_key(metric) {
            return Err(Error::Schema(format!(
                "sample {:?}: small is missing metric {metric:?}",
                s.id
            )));
        }
        if !s.large.contains_key(metric) {
            return Err(Error::Schema(format!(
                "sample {:?}: large is missing metric {metric:?}",
                s.id
            )));
        }
    }
    for metric in s.small.keys() {
        if !s.large.contains_key(metric) {
            return Err(Error::Schema(format!(
                "sample {:?}: metric {metric:?} present for small but not large",
                s.id
            )));
        }
    }
    for metric in s.large.keys() {
        if !s.small.contains_key(metric) {
            return Err(Error::Schema(format!(
                "sample {:?}: metric {metric:?} present for large but not small",
                s.id
            )));
        }
    }
    for (metric, q) in &s.small {
        q.validate(&s.id, "small", metric)?;
    }
    for (metric, q) in &s.large {
        q.validate(&s.id, "large", metric)?;
    }
    if let Some(e) = &s.embedding {
        if let Some(dim) = embedding_dim {
            if e.len() != dim {
                return Err(Error::Schema(format!(
                    "sample {:?}: embedding has length {}, expected {dim}",
                    s.id,
                    e.len()
                )));
            }
        }
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema(format!(
                "sample {:?}: embedding has non-finite entries",
                s.id
            )));
        }
    }
    Ok(())
}

/// Samples with the given split, in dataset order.
pub fn split_view(samples: &[QuerySample], split: Split) -> Vec<&QuerySample> {
    samples.iter().filter(|s| s.split == split).collect()
}

/// Loads and validates a dataset file.
///
/// Declared metrics are the union of the header's `metrics` and
/// `expected_metrics`; when both are absent, the metrics of the first
/// record are used. If the header omits `embedding_dim`, it is inferred
/// from the first record that carries an embedding.
pub fn load_dataset(
    path: impl AsRef<Path>,
    expected_metrics: Option<&BTreeSet<String>>,
) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(BufReader::new(file), expected_metrics).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_dataset<R: BufRead>(
    reader: R,
    expected_metrics: Option<&BTreeSet<String>>,
) -> Result<Dataset> {
    let mut meta: Option<DatasetMeta> = None;
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io("<reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        if samples.is_empty() && meta.is_none() {
            if let Ok(h) = serde_json::from_str::<HeaderLine>(&line) {
                meta = Some(h.meta);
                continue;
            }
        }
        let sample: QuerySample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        samples.push(sample);
    }

    let meta = meta.unwrap_or_default();
    let mut declared: BTreeSet<String> = meta.metrics.iter().cloned().collect();
    if let Some(exp) = expected_metrics {
        declared.extend(exp.iter().cloned());
    }
    if declared.is_empty() {
        if let Some(first) = samples.first() {
            declared.extend(first.small.keys().cloned());
        }
    }
    let embedding_dim = meta.embedding_dim.or_else(|| {
        samples
            .iter()
            .find_map(|s| s.embedding.as_ref().map(|e| e.len()))
    });
    Dataset::new(samples, embedding_dim, declared)
}
