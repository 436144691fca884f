//! Seeded synthetic corpora with planted ground truth.
//!
//! * `separable`: a marker word appears in roughly 40% of queries; exactly
//!   those queries have small-model samples that dominate every large-model
//!   sample, so their probabilistic label is 1 and every other label is 0.
//! * `gap_correlated`: each query carries one of ten level words; the mean
//!   quality gap falls linearly with the level, so the small model is
//!   usually much weaker and fewer than 10% of probabilistic labels exceed 0.5.
//! * `symmetric_random`: gaps are symmetric around zero and independent of
//!   the text.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, QualitySamples, QuerySample, Split};
use crate::error::{Error, Result};

pub const SYNTH_METRIC: &str = "bart_score";
pub const SEPARABLE_MARKER: &str = "zephyr";
pub const LEVEL_WORDS: [&str; 10] = [
    "aurora", "basalt", "cobalt", "dynamo", "ember", "fjord", "glacier", "harbor", "indigo", "jasper",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Separable,
    GapCorrelated,
    SymmetricRandom,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separable" => Ok(Preset::Separable),
            "gap_correlated" | "gap-correlated" => Ok(Preset::GapCorrelated),
            "symmetric_random" | "symmetric-random" => Ok(Preset::SymmetricRandom),
            other => Err(Error::Input(format!("unknown synth preset {other:?}"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Separable => "separable",
            Preset::GapCorrelated => "gap_correlated",
            Preset::SymmetricRandom => "symmetric_random",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub preset: Preset,
    pub n: usize,
    pub seed: u64,
    pub samples_per_side: usize,
    /// Probability mass of (train, validation); the rest is test.
    pub split_fractions: (f64, f64),
    /// Per-sample noise standard deviation.
    pub noise_sd: f64,
}

impl SynthConfig {
    pub fn new(preset: Preset, n: usize, seed: u64) -> Self {
        SynthConfig {
            preset,
            n,
            seed,
            samples_per_side: 10,
            split_fractions: (0.7, 0.15),
            noise_sd: 0.3,
        }
    }
}

const SYLLABLES: [&str; 12] = ["ka", "lo", "mi", "ne", "ru", "sa", "ti", "vo", "be", "pa", "gu", "do"];

fn vocabulary() -> Vec<String> {
    let mut v = Vec::new();
    for a in SYLLABLES {
        for b in SYLLABLES {
            v.push(format!("{a}{b}"));
        }
    }
    v
}

fn filler(rng: &mut ChaCha8Rng, vocab: &[String]) -> Vec<String> {
    let len = rng.random_range(4..=12);
    (0..len).map(|_| vocab.choose(rng).expect("non-empty vocabulary").clone()).collect()
}

fn insert_word(rng: &mut ChaCha8Rng, words: &mut Vec<String>, w: &str) {
    let pos = rng.random_range(0..=words.len());
    words.insert(pos, w.to_string());
}

fn uniform_samples(rng: &mut ChaCha8Rng, k: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..k).map(|_| rng.random_range(lo..hi)).collect()
}

fn normal_samples(rng: &mut ChaCha8Rng, k: usize, mean: f64, sd: f64) -> Vec<f64> {
    let d = Normal::new(mean, sd).expect("valid normal parameters");
    (0..k).map(|_| d.sample(rng)).collect()
}

/// Mean quality gap of a `gap_correlated` level.
pub fn level_gap(level: usize) -> f64 {
    -0.1 - 0.25 * level as f64
}

pub fn synth(preset: Preset, n: usize, seed: u64) -> Result<Dataset> {
    synth_with(&SynthConfig::new(preset, n, seed))
}

pub fn synth_with(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.n == 0 {
        return Err(Error::Input("synth needs n >= 1".into()));
    }
    if cfg.samples_per_side == 0 {
        return Err(Error::Input("synth needs at least one sample per side".into()));
    }
    if !(cfg.noise_sd > 0.0) {
        return Err(Error::Input("noise_sd must be positive".into()));
    }
    let vocab = vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.samples_per_side;
    let (f_train, f_val) = cfg.split_fractions;
    let jitter = Normal::new(0.0, 0.1).expect("valid normal parameters");
    let sym_gap = Normal::new(0.0, 0.5).expect("valid normal parameters");

    let mut samples = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let u: f64 = rng.random();
        let split = if u < f_train {
            Split::Train
        } else if u < f_train + f_val {
            Split::Validation
        } else {
            Split::Test
        };
        let mut words = filler(&mut rng, &vocab);
        let (small, large) = match cfg.preset {
            Preset::Separable => {
                let marked = rng.random_bool(0.4);
                let large = uniform_samples(&mut rng, k, -3.0, -2.5);
                let small = if marked {
                    insert_word(&mut rng, &mut words, SEPARABLE_MARKER);
                    uniform_samples(&mut rng, k, -2.5, -2.0)
                } else {
                    uniform_samples(&mut rng, k, -4.5, -3.5)
                };
                (small, large)
            }
            Preset::GapCorrelated => {
                let level = rng.random_range(0..LEVEL_WORDS.len());
                insert_word(&mut rng, &mut words, LEVEL_WORDS[level]);
                let gap = level_gap(level) + jitter.sample(&mut rng);
                let large_mean = rng.random_range(-3.0..-2.0);
                let large = normal_samples(&mut rng, k, large_mean, cfg.noise_sd);
                let small = normal_samples(&mut rng, k, large_mean + gap, cfg.noise_sd);
                (small, large)
            }
            Preset::SymmetricRandom => {
                let gap = sym_gap.sample(&mut rng);
                let mid = rng.random_range(-3.0..-2.0);
                let large = normal_samples(&mut rng, k, mid - gap / 2.0, cfg.noise_sd);
                let small = normal_samples(&mut rng, k, mid + gap / 2.0, cfg.noise_sd);
                (small, large)
            }
        };
        samples.push(QuerySample {
            id: format!("{}-{i:06}", cfg.preset),
            query_text: words.join(" "),
            embedding: None,
            small: BTreeMap::from([(SYNTH_METRIC.to_string(), QualitySamples(small))]),
            large: BTreeMap::from([(SYNTH_METRIC.to_string(), QualitySamples(large))]),
            split,
            small_responses: None,
            large_responses: None,
        });
    }
    Dataset::new(samples, None, [SYNTH_METRIC.to_string()].into())
}

/// Whether a `separable` query carries the planted marker.
pub fn is_marked(q: &QuerySample) -> bool {
    q.query_text.split(' ').any(|w| w == SEPARABLE_MARKER)
}

/// Level of a `gap_correlated` query, if any level word is present.
pub fn level_of(q: &QuerySample) -> Option<usize> {
    q.query_text
        .split(' ')
        .find_map(|w| LEVEL_WORDS.iter().position(|l| *l == w))
}
