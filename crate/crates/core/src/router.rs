//! Linear probabilistic router: `score(x) = sigmoid(w . phi(x) + b)`.
//!
//! Features come either from signed hashing of word n-grams or from an
//! embedding stored with the query. Training minimizes the mean binary
//! cross-entropy against soft labels plus an L2 penalty, using mini-batch
//! gradient descent with a seeded shuffle.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::QuerySample;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::labeling::{LabelScheme, LabeledExample};
use crate::policy::CalibrationEntry;

pub const MODEL_FORMAT: &str = "hyroute-model/v1";
/// Predictions are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside the loss.
pub const BCE_EPS: f64 = 1e-7;
pub const DEFAULT_HASH_DIM: usize = 1 << 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    HashedNgrams,
    ExternalEmbedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturizerConfig {
    pub kind: FeatureKind,
    pub dim: usize,
    /// Inclusive word n-gram lengths.
    pub ngram_range: (usize, usize),
    pub hash_seed: u64,
    pub lowercase: bool,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        FeaturizerConfig {
            kind: FeatureKind::HashedNgrams,
            dim: DEFAULT_HASH_DIM,
            ngram_range: (1, 2),
            hash_seed: 0,
            lowercase: true,
        }
    }
}

impl FeaturizerConfig {
    pub fn hashed(dim: usize) -> Self {
        FeaturizerConfig {
            dim,
            ..Default::default()
        }
    }

    pub fn embedding(dim: usize) -> Self {
        FeaturizerConfig {
            kind: FeatureKind::ExternalEmbedding,
            dim,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim > u32::MAX as usize {
            return Err(Error::Input(format!("feature dim {} out of range", self.dim)));
        }
        let (lo, hi) = self.ngram_range;
        if !(1 <= lo && lo <= hi && hi <= 3) {
            return Err(Error::Input(format!(
                "ngram_range ({lo}, {hi}) must satisfy 1 <= min <= max <= 3"
            )));
        }
        Ok(())
    }
}

/// Sparse feature vector with strictly increasing indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub dim: usize,
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl Features {
    pub fn zeros(dim: usize) -> Self {
        Features {
            dim,
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn dense(values: &[f64]) -> Self {
        Features {
            dim: values.len(),
            indices: (0..values.len() as u32).collect(),
            values: values.to_vec(),
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for (&i, &x) in self.indices.iter().zip(&self.values) {
            v[i as usize] = x;
        }
        v
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &x)| (i as usize, x))
    }

    pub fn dot(&self, weights: &[f64]) -> f64 {
        self.iter().map(|(i, x)| weights[i] * x).sum()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, parts: &[&str]) -> u64 {
    let mut h = FNV_OFFSET;
    let mut eat = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    };
    for b in seed.to_le_bytes() {
        eat(b);
    }
    for (k, p) in parts.iter().enumerate() {
        if k > 0 {
            eat(0x1f);
        }
        for &b in p.as_bytes() {
            eat(b);
        }
    }
    h
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn tokenize(text: &str, lowercase: bool) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| if lowercase { t.to_lowercase() } else { t.to_string() })
        .collect()
}

/// Signed-hash bag of word n-grams, L2-normalized when non-zero.
pub fn hash_text(cfg: &FeaturizerConfig, text: &str) -> Features {
    let tokens = tokenize(text, cfg.lowercase);
    let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
    let (lo, hi) = cfg.ngram_range;
    for n in lo..=hi {
        for gram in tokens.windows(n) {
            let parts: Vec<&str> = gram.iter().map(String::as_str).collect();
            let h = mix(fnv1a(cfg.hash_seed, &parts));
            let bucket = (h % cfg.dim as u64) as u32;
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            *acc.entry(bucket).or_insert(0.0) += sign;
        }
    }
    acc.retain(|_, v| *v != 0.0);
    let mut f = Features {
        dim: cfg.dim,
        indices: acc.keys().copied().collect(),
        values: acc.values().copied().collect(),
    };
    let norm = f.norm();
    if norm > 0.0 {
        for v in &mut f.values {
            *v /= norm;
        }
    }
    f
}

/// Features for a raw request; `embedding` is only accepted by
/// external-embedding featurizers.
pub fn featurize_input(
    cfg: &FeaturizerConfig,
    text: &str,
    embedding: Option<&[f64]>,
) -> Result<Features> {
    match cfg.kind {
        FeatureKind::HashedNgrams => {
            if embedding.is_some() {
                return Err(Error::Input(
                    "embedding supplied but the model uses hashed n-gram features".into(),
                ));
            }
            Ok(hash_text(cfg, text))
        }
        FeatureKind::ExternalEmbedding => {
            let e = embedding.ok_or_else(|| {
                Error::Input("model uses external embeddings but none was supplied".into())
            })?;
            if e.len() != cfg.dim {
                return Err(Error::Input(format!(
                    "embedding has length {}, model expects {}",
                    e.len(),
                    cfg.dim
                )));
            }
            if e.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input("embedding has non-finite entries".into()));
            }
            Ok(Features::dense(e))
        }
    }
}

pub fn featurize(cfg: &FeaturizerConfig, q: &QuerySample) -> Result<Features> {
    match cfg.kind {
        FeatureKind::HashedNgrams => Ok(hash_text(cfg, &q.query_text)),
        FeatureKind::ExternalEmbedding => featurize_input(cfg, &q.query_text, q.embedding.as_deref())
            .map_err(|e| Error::Input(format!("sample {:?}: {e}", q.id))),
    }
}

pub fn featurize_all(exec: Exec, cfg: &FeaturizerConfig, samples: &[QuerySample]) -> Result<Vec<Features>> {
    cfg.validate()?;
    exec.try_map(samples, |q| featurize(cfg, q))
}

/// Fills `features` of each example from the sample with the same position.
pub fn attach_features(
    exec: Exec,
    cfg: &FeaturizerConfig,
    examples: &mut [LabeledExample],
    samples: &[QuerySample],
) -> Result<()> {
    if examples.len() != samples.len() {
        return Err(Error::Input(format!(
            "{} examples but {} samples",
            examples.len(),
            samples.len()
        )));
    }
    let feats = featurize_all(exec, cfg, samples)?;
    for ((ex, q), f) in examples.iter_mut().zip(samples).zip(feats) {
        if ex.query_id != q.id {
            return Err(Error::Input(format!(
                "example {:?} does not line up with sample {:?}",
                ex.query_id, q.id
            )));
        }
        ex.features = Some(f);
    }
    Ok(())
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Largest double below 1.
const MAX_SCORE: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            learning_rate: 0.1,
            l2: 1e-6,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Input(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(Error::Input(format!("l2 {} must be >= 0", self.l2)));
        }
        if self.batch_size == 0 {
            return Err(Error::Input("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub final_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_loss: Option<f64>,
    pub train_examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterModel {
    pub format: String,
    pub featurizer: FeaturizerConfig,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub scheme: LabelScheme,
    /// Quality metric the labels were built from.
    pub metric: String,
    pub training_meta: TrainingMeta,
    /// Calibrated thresholds keyed by (metric, max_drop_pct).
    #[serde(default)]
    pub thresholds: Vec<CalibrationEntry>,
}

impl RouterModel {
    /// All-zero model; scores 0.5 everywhere.
    pub fn zeros(featurizer: FeaturizerConfig, scheme: LabelScheme, metric: &str) -> Self {
        RouterModel {
            format: MODEL_FORMAT.to_string(),
            weights: vec![0.0; featurizer.dim],
            featurizer,
            bias: 0.0,
            scheme,
            metric: metric.to_string(),
            training_meta: TrainingMeta {
                epochs: 0,
                learning_rate: 0.0,
                l2: 0.0,
                batch_size: 0,
                seed: 0,
                final_loss: std::f64::consts::LN_2,
                best_epoch: None,
                validation_loss: None,
                train_examples: 0,
            },
            thresholds: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != MODEL_FORMAT {
            return Err(Error::Schema(format!(
                "unsupported model format {:?}, expected {MODEL_FORMAT:?}",
                self.format
            )));
        }
        self.featurizer.validate()?;
        if self.weights.len() != self.featurizer.dim {
            return Err(Error::Schema(format!(
                "model has {} weights but featurizer dim {}",
                self.weights.len(),
                self.featurizer.dim
            )));
        }
        if !self.bias.is_finite() || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Schema("model parameters must be finite".into()));
        }
        self.scheme.validate()
    }

    pub fn logit(&self, features: &Features) -> Result<f64> {
        if features.dim != self.weights.len() {
            return Err(Error::Input(format!(
                "feature length {} does not match model dim {}",
                features.dim,
                self.weights.len()
            )));
        }
        Ok(features.dot(&self.weights) + self.bias)
    }

    pub fn score_sample(&self, q: &QuerySample) -> Result<f64> {
        score(self, &featurize(&self.featurizer, q)?)
    }

    pub fn score_input(&self, text: &str, embedding: Option<&[f64]>) -> Result<f64> {
        score(self, &featurize_input(&self.featurizer, text, embedding)?)
    }

    pub fn score_all(&self, exec: Exec, samples: &[QuerySample]) -> Result<Vec<f64>> {
        exec.try_map(samples, |q| self.score_sample(q))
    }

    /// Most recent calibration entry for `metric` (and `max_drop_pct`, if given).
    pub fn threshold_for(&self, metric: &str, max_drop_pct: Option<f64>) -> Option<&CalibrationEntry> {
        self.thresholds
            .iter()
            .rev()
            .find(|e| e.metric == metric && max_drop_pct.is_none_or(|d| e.max_drop_pct == d))
    }

    /// Inserts or replaces the entry with the same (metric, max_drop_pct).
    pub fn upsert_threshold(&mut self, entry: CalibrationEntry) {
        self.thresholds
            .retain(|e| !(e.metric == entry.metric && e.max_drop_pct == entry.max_drop_pct));
        self.thresholds.push(entry);
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let m: RouterModel = serde_json::from_reader(BufReader::new(f))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Router score in (0, 1).
pub fn score(m: &RouterModel, features: &Features) -> Result<f64> {
    Ok(sigmoid(m.logit(features)?).clamp(f64::MIN_POSITIVE, MAX_SCORE))
}

/// Mean binary cross-entropy with predictions clamped to `[BCE_EPS, 1 - BCE_EPS]`.
pub fn bce_loss(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Input("bce_loss needs at least one example".into()));
    }
    let total: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(&p, &y)| bce_term(p, y))
        .sum();
    Ok(total / predictions.len() as f64)
}

fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// d(bce)/d(logit) for one example, including the clamp.
fn dloss_dlogit(p: f64, y: f64) -> f64 {
    if (BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
        p - y
    } else {
        0.0
    }
}

fn example_features(ex: &LabeledExample) -> Result<&Features> {
    ex.features
        .as_ref()
        .ok_or_else(|| Error::Input(format!("example {:?} has no features", ex.query_id)))
}

fn check_examples(examples: &[LabeledExample], dim: usize) -> Result<()> {
    for ex in examples {
        if !(0.0..=1.0).contains(&ex.label) {
            return Err(Error::Input(format!(
                "example {:?} has label {} outside [0, 1]",
                ex.query_id, ex.label
            )));
        }
        let f = example_features(ex)?;
        if f.dim != dim {
            return Err(Error::Input(format!(
                "example {:?} has feature dim {}, expected {dim}",
                ex.query_id, f.dim
            )));
        }
    }
    Ok(())
}

/// Objective `mean BCE + l2 * ||w||^2` over `examples`.
pub fn objective(examples: &[LabeledExample], weights: &[f64], bias: f64, l2: f64) -> Result<f64> {
    let mut preds = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    for ex in examples {
        preds.push(sigmoid(example_features(ex)?.dot(weights) + bias));
        labels.push(ex.label);
    }
    let penalty: f64 = weights.iter().map(|w| w * w).sum::<f64>() * l2;
    Ok(bce_loss(&preds, &labels)? + penalty)
}

/// Sparse gradient of [`objective`]: per-index weight gradient of the data
/// term, the bias gradient, and the data loss. The L2 term is left to the
/// caller since it touches every weight.
struct BatchGradient {
    data: BTreeMap<usize, f64>,
    bias: f64,
    loss: f64,
}

fn batch_gradient<'a>(
    batch: impl Iterator<Item = &'a LabeledExample>,
    weights: &[f64],
    bias: f64,
) -> BatchGradient {
    let mut data = BTreeMap::new();
    let mut gb = 0.0;
    let mut loss = 0.0;
    let mut n = 0usize;
    for ex in batch {
        let f = ex.features.as_ref().expect("features checked before training");
        let p = sigmoid(f.dot(weights) + bias);
        loss += bce_term(p, ex.label);
        let g = dloss_dlogit(p, ex.label);
        if g != 0.0 {
            for (i, x) in f.iter() {
                *data.entry(i).or_insert(0.0) += g * x;
            }
        }
        gb += g;
        n += 1;
    }
    let inv = 1.0 / n as f64;
    for v in data.values_mut() {
        *v *= inv;
    }
    BatchGradient {
        data,
        bias: gb * inv,
        loss: loss * inv,
    }
}

/// Full analytic gradient of [`objective`] as (weights, bias).
pub fn objective_gradient(
    examples: &[LabeledExample],
    weights: &[f64],
    bias: f64,
    l2: f64,
) -> Result<(Vec<f64>, f64)> {
    check_examples(examples, weights.len())?;
    if examples.is_empty() {
        return Err(Error::Input("no examples".into()));
    }
    let g = batch_gradient(examples.iter(), weights, bias);
    let mut gw: Vec<f64> = weights.iter().map(|w| 2.0 * l2 * w).collect();
    for (i, v) in g.data {
        gw[i] += v;
    }
    Ok((gw, g.bias))
}

pub fn train(
    examples: &[LabeledExample],
    featurizer: &FeaturizerConfig,
    scheme: LabelScheme,
    metric: &str,
    hyper: &TrainConfig,
) -> Result<RouterModel> {
    train_inner(examples, None, featurizer, scheme, metric, hyper)
}

/// Like [`train`], but keeps the epoch whose parameters give the lowest
/// validation BCE (ties keep the earlier epoch).
pub fn train_with_validation(
    examples: &[LabeledExample],
    validation: &[LabeledExample],
    featurizer: &FeaturizerConfig,
    scheme: LabelScheme,
    metric: &str,
    hyper: &TrainConfig,
) -> Result<RouterModel> {
    if validation.is_empty() {
        return Err(Error::Input("validation set for checkpoint selection is empty".into()));
    }
    check_examples(validation, featurizer.dim)?;
    train_inner(examples, Some(validation), featurizer, scheme, metric, hyper)
}

fn train_inner(
    examples: &[LabeledExample],
    validation: Option<&[LabeledExample]>,
    featurizer: &FeaturizerConfig,
    scheme: LabelScheme,
    metric: &str,
    hyper: &TrainConfig,
) -> Result<RouterModel> {
    featurizer.validate()?;
    scheme.validate()?;
    hyper.validate()?;
    if examples.is_empty() {
        return Err(Error::Input("cannot train on an empty example set".into()));
    }
    check_examples(examples, featurizer.dim)?;

    let mut weights = vec![0.0; featurizer.dim];
    let mut bias = 0.0;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);

    let val_loss = |w: &[f64], b: f64| validation.map(|v| objective(v, w, b, 0.0)).transpose();
    let mut best: Option<(usize, f64, Vec<f64>, f64)> = None;
    if let Some(l) = val_loss(&weights, bias)? {
        best = Some((0, l, weights.clone(), bias));
    }

    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let lr = hyper.learning_rate / (epoch as f64).sqrt();
        for (batch_idx, chunk) in order.chunks(hyper.batch_size).enumerate() {
            let g = batch_gradient(chunk.iter().map(|&i| &examples[i]), &weights, bias);
            if !g.loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: batch_idx,
                    loss: g.loss,
                });
            }
            if hyper.l2 > 0.0 {
                let decay = 1.0 - lr * 2.0 * hyper.l2;
                for w in weights.iter_mut() {
                    *w *= decay;
                }
            }
            for (i, v) in g.data {
                weights[i] -= lr * v;
            }
            bias -= lr * g.bias;
            if !bias.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: batch_idx,
                    loss: f64::NAN,
                });
            }
        }
        if let Some(l) = val_loss(&weights, bias)? {
            if best.as_ref().is_none_or(|b| l < b.1) {
                best = Some((epoch, l, weights.clone(), bias));
            }
        }
    }

    let (best_epoch, validation_loss) = match best {
        Some((e, l, w, b)) => {
            weights = w;
            bias = b;
            (Some(e), Some(l))
        }
        None => (None, None),
    };
    let final_loss = objective(examples, &weights, bias, hyper.l2)?;
    if !final_loss.is_finite() {
        return Err(Error::Training {
            epoch: hyper.epochs,
            batch: 0,
            loss: final_loss,
        });
    }

    Ok(RouterModel {
        format: MODEL_FORMAT.to_string(),
        featurizer: featurizer.clone(),
        weights,
        bias,
        scheme,
        metric: metric.to_string(),
        training_meta: TrainingMeta {
            epochs: hyper.epochs,
            learning_rate: hyper.learning_rate,
            l2: hyper.l2,
            batch_size: hyper.batch_size,
            seed: hyper.seed,
            final_loss,
            best_epoch,
            validation_loss,
            train_examples: examples.len(),
        },
        thresholds: Vec::new(),
    })
}

/// Maximum relative error between the analytic gradient of
/// `mean BCE + l2 ||w||^2` and central finite differences with step `h`.
///
/// Checked coordinates: the bias, every weight touched by some example's
/// features, and every non-zero weight. The relative error of a coordinate
/// is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn gradient_check(examples: &[LabeledExample], model: &RouterModel, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Input(format!("finite-difference step must be positive, got {h}")));
    }
    let l2 = model.training_meta.l2;
    let (gw, gb) = objective_gradient(examples, &model.weights, model.bias, l2)?;

    let mut coords: Vec<usize> = examples
        .iter()
        .flat_map(|ex| ex.features.as_ref().map(|f| f.indices.clone()).unwrap_or_default())
        .map(|i| i as usize)
        .collect();
    coords.extend(
        model
            .weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(i, _)| i),
    );
    coords.sort_unstable();
    coords.dedup();

    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
    let mut w = model.weights.clone();
    let mut worst = 0.0f64;
    for i in coords {
        let orig = w[i];
        w[i] = orig + h;
        let up = objective(examples, &w, model.bias, l2)?;
        w[i] = orig - h;
        let down = objective(examples, &w, model.bias, l2)?;
        w[i] = orig;
        worst = worst.max(rel(gw[i], (up - down) / (2.0 * h)));
    }
    let up = objective(examples, &w, model.bias + h, l2)?;
    let down = objective(examples, &w, model.bias - h, l2)?;
    worst = worst.max(rel(gb, (up - down) / (2.0 * h)));
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn ex(label: f64, x: &[f64]) -> LabeledExample {
        LabeledExample {
            query_id: String::new(),
            label,
            features: Some(Features::dense(x)),
        }
    }

    fn model_with(weights: Vec<f64>, bias: f64, l2: f64) -> RouterModel {
        let mut m = RouterModel::zeros(FeaturizerConfig::embedding(weights.len()), LabelScheme::probabilistic(), "m");
        m.weights = weights;
        m.bias = bias;
        m.training_meta.l2 = l2;
        m
    }

    fn random_instance(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Vec<LabeledExample>, RouterModel) {
        let examples = (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                ex(rng.random_range(0.0..=1.0), &x)
            })
            .collect();
        let w = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
        (examples, model_with(w, rng.random_range(-0.5..0.5), 1e-3))
    }

    #[test]
    fn hashed_featurizer_basics() {
        let cfg = FeaturizerConfig::hashed(1 << 10);
        assert_eq!(hash_text(&cfg, "").indices.len(), 0);
        assert_eq!(hash_text(&cfg, "   ,, "), Features::zeros(1 << 10));
        let a = hash_text(&cfg, "what is the median index");
        assert_eq!(a, hash_text(&cfg, "what is the median index"));
        assert!((a.norm() - 1.0).abs() < 1e-12);

        let uni = FeaturizerConfig {
            ngram_range: (1, 1),
            ..cfg.clone()
        };
        assert_eq!(hash_text(&uni, "a b"), hash_text(&uni, "b a"));
        assert_ne!(hash_text(&cfg, "a b"), hash_text(&cfg, "b a"));
        assert_eq!(hash_text(&uni, "Hello"), hash_text(&uni, "hello"));
    }

    #[test]
    fn hash_seed_changes_buckets() {
        let a = FeaturizerConfig::hashed(1 << 16);
        let b = FeaturizerConfig { hash_seed: 7, ..a.clone() };
        assert_ne!(hash_text(&a, "alpha beta gamma"), hash_text(&b, "alpha beta gamma"));
    }

    #[test]
    fn featurizer_config_validation() {
        assert!(FeaturizerConfig::hashed(0).validate().is_err());
        let bad = FeaturizerConfig { ngram_range: (2, 1), ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = FeaturizerConfig { ngram_range: (1, 4), ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn embedding_featurizer() {
        let cfg = FeaturizerConfig::embedding(2);
        assert_eq!(featurize_input(&cfg, "x", Some(&[0.25, -1.0])).unwrap().to_dense(), vec![0.25, -1.0]);
        assert!(matches!(featurize_input(&cfg, "x", None), Err(Error::Input(_))));
        assert!(matches!(featurize_input(&cfg, "x", Some(&[1.0])), Err(Error::Input(_))));
        let hashed = FeaturizerConfig::hashed(8);
        assert!(matches!(featurize_input(&hashed, "x", Some(&[1.0])), Err(Error::Input(_))));
    }

    #[test]
    fn score_examples() {
        let m = model_with(vec![0.0, 0.0], 0.0, 0.0);
        assert_eq!(score(&m, &Features::dense(&[3.0, -7.0])).unwrap(), 0.5);
        let m = model_with(vec![0.0, 0.0], 20.0, 0.0);
        assert!(score(&m, &Features::dense(&[3.0, -7.0])).unwrap() > 0.999);
        let m = model_with(vec![1.0, 0.0], 0.0, 0.0);
        let s = score(&m, &Features::dense(&[3f64.ln(), 5.0])).unwrap();
        assert!((s - 0.75).abs() < 1e-15);
        assert!(matches!(score(&m, &Features::dense(&[1.0])), Err(Error::Input(_))));
        let m = model_with(vec![1.0], 1000.0, 0.0);
        let s = score(&m, &Features::dense(&[1.0])).unwrap();
        assert!(s < 1.0 && s > 0.0);
    }

    #[test]
    fn bce_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((bce_loss(&[0.5], &[1.0]).unwrap() - ln2).abs() < 1e-15);
        assert!((bce_loss(&[0.5, 0.5], &[0.5, 0.5]).unwrap() - ln2).abs() < 1e-15);
        assert!(bce_loss(&[1.0 - 1e-12], &[1.0]).unwrap() < 1e-6);
        assert!(bce_loss(&[0.5], &[1.0, 0.0]).is_err());
        // clamp keeps the loss finite
        assert!(bce_loss(&[0.0], &[1.0]).unwrap().is_finite());
    }

    #[test]
    fn gradient_check_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let (examples, model) = random_instance(&mut rng, 10, 5);
            let err = gradient_check(&examples, &model, 1e-5).unwrap();
            assert!(err < 1e-4, "max rel err {err}");
        }
    }

    #[test]
    fn gradient_check_stationary_point() {
        let examples: Vec<_> = (0..6).map(|i| ex(0.5, &[i as f64, 1.0 - i as f64])).collect();
        let model = model_with(vec![0.0, 0.0], 0.0, 1e-3);
        let (gw, gb) = objective_gradient(&examples, &model.weights, model.bias, 1e-3).unwrap();
        let norm = (gw.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt();
        assert!(norm < 1e-8);
        assert!(gradient_check(&examples, &model, 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn coarse_step_is_less_accurate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (examples, model) = random_instance(&mut rng, 10, 4);
        let fine = gradient_check(&examples, &model, 1e-5).unwrap();
        let coarse = gradient_check(&examples, &model, 1e-1).unwrap();
        assert!(coarse > fine, "coarse {coarse} fine {fine}");
    }

    #[test]
    fn train_separable_2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let examples: Vec<_> = (0..200)
            .map(|_| {
                let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                ex(if x[0] > 0.0 { 1.0 } else { 0.0 }, &x)
            })
            .collect();
        let hyper = TrainConfig {
            epochs: 200,
            learning_rate: 1.0,
            l2: 0.0,
            batch_size: 16,
            seed: 1,
        };
        let m = train(&examples, &FeaturizerConfig::embedding(2), LabelScheme::deterministic(), "m", &hyper).unwrap();
        let correct = examples
            .iter()
            .filter(|e| {
                let s = score(&m, e.features.as_ref().unwrap()).unwrap();
                (s > 0.5) == (e.label == 1.0)
            })
            .count();
        assert!(correct as f64 / 200.0 >= 0.99, "accuracy {correct}/200");
    }

    #[test]
    fn train_uniform_soft_labels_centers_at_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let examples: Vec<_> = (0..100)
            .map(|_| ex(0.5, &[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]))
            .collect();
        let m = train(&examples, &FeaturizerConfig::embedding(2), LabelScheme::probabilistic(), "m", &TrainConfig::default()).unwrap();
        let mean: f64 = examples
            .iter()
            .map(|e| score(&m, e.features.as_ref().unwrap()).unwrap())
            .sum::<f64>()
            / 100.0;
        assert!((mean - 0.5).abs() < 0.05);
    }

    #[test]
    fn zero_epochs_returns_zero_model() {
        let examples = vec![ex(1.0, &[1.0, 2.0]), ex(0.0, &[-1.0, 0.0])];
        let hyper = TrainConfig { epochs: 0, ..Default::default() };
        let m = train(&examples, &FeaturizerConfig::embedding(2), LabelScheme::deterministic(), "m", &hyper).unwrap();
        assert!(m.weights.iter().all(|&w| w == 0.0));
        assert_eq!(m.bias, 0.0);
        assert_eq!(score(&m, &Features::dense(&[9.0, 9.0])).unwrap(), 0.5);
    }

    #[test]
    fn training_divergence_is_reported() {
        let examples = vec![ex(1.0, &[1e200, 0.0]), ex(0.0, &[-1e200, 1.0])];
        let hyper = TrainConfig { epochs: 3, learning_rate: 1e200, l2: 1.0, batch_size: 1, seed: 0 };
        let err = train(&examples, &FeaturizerConfig::embedding(2), LabelScheme::deterministic(), "m", &hyper).unwrap_err();
        assert!(matches!(err, Error::Training { .. }), "{err}");
    }

    #[test]
    fn training_is_reproducible_and_rejects_missing_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (examples, _) = random_instance(&mut rng, 40, 3);
        let cfg = FeaturizerConfig::embedding(3);
        let h = TrainConfig { seed: 42, ..Default::default() };
        let a = train(&examples, &cfg, LabelScheme::probabilistic(), "m", &h).unwrap();
        let b = train(&examples, &cfg, LabelScheme::probabilistic(), "m", &h).unwrap();
        assert_eq!(a, b);

        let mut bare = examples.clone();
        bare[0].features = None;
        assert!(matches!(train(&bare, &cfg, LabelScheme::probabilistic(), "m", &h), Err(Error::Input(_))));
    }

    #[test]
    fn checkpoint_selection_records_best_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (train_ex, _) = random_instance(&mut rng, 60, 3);
        let (val_ex, _) = random_instance(&mut rng, 20, 3);
        let m = train_with_validation(&train_ex, &val_ex, &FeaturizerConfig::embedding(3), LabelScheme::probabilistic(), "m", &TrainConfig::default()).unwrap();
        let best = m.training_meta.best_epoch.unwrap();
        assert!(best <= 5);
        let vl = objective(&val_ex, &m.weights, m.bias, 0.0).unwrap();
        assert_eq!(Some(vl), m.training_meta.validation_loss);
    }

    #[test]
    fn model_artifact_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (examples, _) = random_instance(&mut rng, 30, 4);
        let m = train(&examples, &FeaturizerConfig::embedding(4), LabelScheme::transformed(0.25).unwrap(), "bart_score", &TrainConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.json");
        m.save(&p).unwrap();
        assert_eq!(RouterModel::load(&p).unwrap(), m);

        let mut bad = m.clone();
        bad.weights.pop();
        bad.save(&p).unwrap();
        assert!(matches!(RouterModel::load(&p), Err(Error::Schema(_))));
    }

    proptest! {
        #[test]
        fn cross_entropy_bounds_entropy(pairs in prop::collection::vec((0.001f64..0.999, 0.0f64..=1.0), 1..30)) {
            let (p, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let yc: Vec<f64> = y.iter().map(|v| v.clamp(BCE_EPS, 1.0 - BCE_EPS)).collect();
            prop_assert!(bce_loss(&p, &y).unwrap() >= bce_loss(&yc, &y).unwrap() - 1e-12);
        }

        #[test]
        fn score_monotone_in_logit(a in -30.0f64..30.0, d in 1e-6f64..5.0) {
            let lo = model_with(vec![1.0], a, 0.0);
            let hi = model_with(vec![1.0], a + d, 0.0);
            let x = Features::dense(&[0.0]);
            prop_assert!(score(&lo, &x).unwrap() < score(&hi, &x).unwrap());
        }
    }
}
