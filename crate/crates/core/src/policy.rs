//! Routing decisions, baseline policies, and threshold calibration.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::QuerySample;
use crate::error::{Error, Result};
use crate::evaluation::{self, QualityTable, TradeoffPoint};
use crate::exec::Exec;

/// Validation subsample size used for calibration when subsampling is requested.
pub const DEFAULT_CALIBRATION_SAMPLES: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Small,
    Large,
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Target::Small => "small",
            Target::Large => "large",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub query_id: String,
    pub target: Target,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RoutingPolicy {
    /// Small iff `score > threshold`.
    Learned { threshold: f64 },
    AllSmall,
    AllLarge,
    /// Large iff a uniform draw in `[0, 1)` falls below `p_large`.
    Random { p_large: f64, rng_seed: u64 },
}

impl RoutingPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RoutingPolicy::Learned { threshold } if threshold.is_nan() => {
                Err(Error::Input("threshold must not be NaN".into()))
            }
            RoutingPolicy::Random { p_large, .. } if !(0.0..=1.0).contains(&p_large) => Err(
                Error::Input(format!("p_large {p_large} must lie in [0, 1]")),
            ),
            _ => Ok(()),
        }
    }

    /// A stateful decision maker; random policies own a freshly seeded generator.
    pub fn decider(&self) -> Result<Decider> {
        self.validate()?;
        let rng = match *self {
            RoutingPolicy::Random { rng_seed, .. } => Some(ChaCha8Rng::seed_from_u64(rng_seed)),
            _ => None,
        };
        Ok(Decider {
            policy: self.clone(),
            rng,
        })
    }
}

/// The learned rule: strictly above the threshold goes to the small model.
pub fn decide_learned(threshold: f64, score: f64) -> Target {
    if score > threshold {
        Target::Small
    } else {
        Target::Large
    }
}

#[derive(Debug, Clone)]
pub struct Decider {
    policy: RoutingPolicy,
    rng: Option<ChaCha8Rng>,
}

impl Decider {
    pub fn policy(&self) -> &RoutingPolicy {
        &self.policy
    }

    pub fn decide(&mut self, score: Option<f64>) -> Result<Target> {
        match self.policy {
            RoutingPolicy::Learned { threshold } => {
                let s = score.ok_or_else(|| Error::Input("learned policy needs a router score".into()))?;
                Ok(decide_learned(threshold, s))
            }
            RoutingPolicy::AllSmall => Ok(Target::Small),
            RoutingPolicy::AllLarge => Ok(Target::Large),
            RoutingPolicy::Random { p_large, .. } => {
                let rng = self.rng.as_mut().expect("random decider owns a generator");
                let u: f64 = rng.random();
                Ok(if u < p_large { Target::Large } else { Target::Small })
            }
        }
    }
}

/// Routes every sample in order. `scores` is required for learned policies.
pub fn route_all(
    policy: &RoutingPolicy,
    samples: &[QuerySample],
    scores: Option<&[f64]>,
) -> Result<Vec<RoutingDecision>> {
    if let Some(s) = scores {
        if s.len() != samples.len() {
            return Err(Error::Input(format!(
                "{} scores for {} samples",
                s.len(),
                samples.len()
            )));
        }
    }
    let mut decider = policy.decider()?;
    samples
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let score = scores.map(|s| s[i]);
            Ok(RoutingDecision {
                query_id: q.id.clone(),
                target: decider.decide(score)?,
                score,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    pub achieved_drop_pct: f64,
    pub achieved_cost_advantage_pct: f64,
    /// False when no grid threshold met the constraint and the all-at-large
    /// sentinel was returned instead.
    pub feasible: bool,
}

/// One row of a model artifact's threshold table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub metric: String,
    pub max_drop_pct: f64,
    pub threshold: f64,
    pub achieved_drop_pct: f64,
    pub achieved_cost_advantage_pct: f64,
    pub feasible: bool,
    pub val_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl CalibrationEntry {
    pub fn new(metric: &str, max_drop_pct: f64, cal: Calibration, val_samples: usize, seed: Option<u64>) -> Self {
        CalibrationEntry {
            metric: metric.to_string(),
            max_drop_pct,
            threshold: cal.threshold,
            achieved_drop_pct: cal.achieved_drop_pct,
            achieved_cost_advantage_pct: cal.achieved_cost_advantage_pct,
            feasible: cal.feasible,
            val_samples,
            seed,
        }
    }
}

pub fn calibrate_threshold(
    samples: &[QuerySample],
    scores: &[f64],
    metric: &str,
    max_drop_pct: f64,
    grid: Option<&[f64]>,
) -> Result<Calibration> {
    calibrate_threshold_with(Exec::default(), samples, scores, metric, max_drop_pct, grid)
}

/// Picks the threshold with the highest cost advantage whose quality drop
/// versus all-at-large is at most `max_drop_pct`. Equal cost advantages
/// resolve to the larger threshold. The default grid is
/// [`evaluation::threshold_grid`] of the scores.
pub fn calibrate_threshold_with(
    exec: Exec,
    samples: &[QuerySample],
    scores: &[f64],
    metric: &str,
    max_drop_pct: f64,
    grid: Option<&[f64]>,
) -> Result<Calibration> {
    if max_drop_pct.is_nan() {
        return Err(Error::Input("max_drop_pct must not be NaN".into()));
    }
    if samples.is_empty() {
        return Err(Error::Input("calibration set is empty".into()));
    }
    let table = QualityTable::new(samples, metric)?;
    table.check_scores(scores)?;
    let base = table.all_large_mean();
    if base == 0.0 {
        return Err(Error::UndefinedBaseline);
    }
    let default_grid;
    let grid = match grid {
        Some(g) if !g.is_empty() => g,
        Some(_) => return Err(Error::Input("threshold grid is empty".into())),
        None => {
            default_grid = evaluation::threshold_grid(scores);
            &default_grid
        }
    };
    let points: Vec<TradeoffPoint> = exec.map(grid, |&t| table.evaluate_threshold(scores, t));

    let mut best: Option<&TradeoffPoint> = None;
    for p in points.iter().filter(|p| p.quality_drop_pct <= max_drop_pct) {
        let better = match best {
            None => true,
            Some(b) => {
                p.cost_advantage_pct > b.cost_advantage_pct
                    || (p.cost_advantage_pct == b.cost_advantage_pct && p.threshold > b.threshold)
            }
        };
        if better {
            best = Some(p);
        }
    }
    Ok(match best {
        Some(p) => Calibration {
            threshold: p.threshold,
            achieved_drop_pct: p.quality_drop_pct,
            achieved_cost_advantage_pct: p.cost_advantage_pct,
            feasible: true,
        },
        None => {
            let t = evaluation::sentinel_above(scores);
            let p = table.evaluate_threshold(scores, t);
            Calibration {
                threshold: t,
                achieved_drop_pct: p.quality_drop_pct,
                achieved_cost_advantage_pct: p.cost_advantage_pct,
                feasible: false,
            }
        }
    })
}

/// Sorted indices of a seeded uniform subsample of size `min(k, n)`.
pub fn subsample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::sample;
    use proptest::prelude::*;

    #[test]
    fn learned_rule_is_strict() {
        assert_eq!(decide_learned(0.5, 0.7), Target::Small);
        assert_eq!(decide_learned(0.5, 0.5), Target::Large);
        let mut d = RoutingPolicy::Learned { threshold: 0.5 }.decider().unwrap();
        assert!(matches!(d.decide(None), Err(Error::Input(_))));
    }

    #[test]
    fn constant_and_degenerate_random_policies() {
        let mut s = RoutingPolicy::AllSmall.decider().unwrap();
        let mut l = RoutingPolicy::AllLarge.decider().unwrap();
        let mut r0 = RoutingPolicy::Random { p_large: 0.0, rng_seed: 1 }.decider().unwrap();
        let mut r1 = RoutingPolicy::Random { p_large: 1.0, rng_seed: 1 }.decider().unwrap();
        for _ in 0..1000 {
            assert_eq!(s.decide(None).unwrap(), Target::Small);
            assert_eq!(l.decide(Some(0.9)).unwrap(), Target::Large);
            assert_eq!(r0.decide(None).unwrap(), Target::Small);
            assert_eq!(r1.decide(None).unwrap(), Target::Large);
        }
        assert!(RoutingPolicy::Random { p_large: 1.5, rng_seed: 0 }.decider().is_err());
    }

    #[test]
    fn random_policy_is_reproducible() {
        let p = RoutingPolicy::Random { p_large: 0.3, rng_seed: 77 };
        let run = || {
            let mut d = p.decider().unwrap();
            (0..200).map(|_| d.decide(None).unwrap()).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        let large = a.iter().filter(|t| **t == Target::Large).count();
        assert!((30..90).contains(&large), "{large}");
    }

    /// 4 queries; small matches large on the two high-score ones and is 10% worse on the rest.
    fn four_query_fixture() -> (Vec<QuerySample>, Vec<f64>) {
        let samples = vec![
            sample("a", &[-2.0], &[-2.0]),
            sample("b", &[-2.0], &[-2.0]),
            sample("c", &[-2.2], &[-2.0]),
            sample("d", &[-2.2], &[-2.0]),
        ];
        (samples, vec![0.9, 0.8, 0.2, 0.1])
    }

    #[test]
    fn calibration_examples() {
        let (samples, scores) = four_query_fixture();
        let c = calibrate_threshold(&samples, &scores, "m", f64::INFINITY, None).unwrap();
        assert_eq!(c.threshold, 0.0);
        assert_eq!(c.achieved_cost_advantage_pct, 100.0);

        let c = calibrate_threshold(&samples, &scores, "m", 1.0, None).unwrap();
        assert!(c.threshold > 0.2 && c.threshold < 0.8, "{c:?}");
        assert_eq!(c.achieved_cost_advantage_pct, 50.0);
        assert_eq!(c.achieved_drop_pct, 0.0);
        assert!(c.feasible);

        let worse = vec![sample("a", &[-3.0], &[-2.0]), sample("b", &[-2.5], &[-2.0])];
        let c = calibrate_threshold(&worse, &[0.7, 0.3], "m", 0.0, None).unwrap();
        assert_eq!(c.threshold, 1.0);
        assert_eq!(c.achieved_cost_advantage_pct, 0.0);
        assert_eq!(c.achieved_drop_pct, 0.0);
        assert!(c.feasible);

        let c = calibrate_threshold(&worse, &[0.7, 0.3], "m", -5.0, None).unwrap();
        assert!(!c.feasible);
        assert_eq!((c.threshold, c.achieved_cost_advantage_pct), (1.0, 0.0));
    }

    #[test]
    fn calibration_rejects_misaligned_scores() {
        let (samples, _) = four_query_fixture();
        assert!(calibrate_threshold(&samples, &[0.5], "m", 1.0, None).is_err());
        assert!(calibrate_threshold(&samples, &[0.1; 4], "m", 1.0, Some(&[])).is_err());
    }

    #[test]
    fn subsample_is_sorted_and_seeded() {
        let a = subsample_indices(2000, 500, 3);
        assert_eq!(a.len(), 500);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a, subsample_indices(2000, 500, 3));
        assert_ne!(a, subsample_indices(2000, 500, 4));
        assert_eq!(subsample_indices(10, 500, 3), (0..10).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn cost_advantage_non_increasing_in_threshold(scores in prop::collection::vec(0.0f64..1.0, 1..30), t1 in 0.0f64..1.0, dt in 0.0f64..0.5) {
            let count = |t: f64| scores.iter().filter(|&&s| decide_learned(t, s) == Target::Small).count();
            prop_assert!(count(t1 + dt) <= count(t1));
        }
    }
}
