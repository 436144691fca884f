//! Training labels derived from sampled response quality.
//!
//! All probability estimates are U-statistics over every cross pair of the
//! small- and large-model sample lists. A pair counts as a success when
//! `q_small >= q_large - t` (ties succeed).

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::QuerySample;
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Number of points in the default relaxation grid.
pub const DEFAULT_T_GRID_POINTS: usize = 64;
/// Upper end of the default grid, as a quantile of observed `q_large - q_small`.
pub const DEFAULT_T_GRID_QUANTILE: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    Deterministic,
    Probabilistic,
    Transformed,
}

impl SchemeKind {
    pub fn short_name(self) -> &'static str {
        match self {
            SchemeKind::Deterministic => "det",
            SchemeKind::Probabilistic => "prob",
            SchemeKind::Transformed => "trans",
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelScheme {
    pub kind: SchemeKind,
    /// Relaxation offset; always 0 unless `kind` is `Transformed`.
    pub t: f64,
}

impl LabelScheme {
    pub fn deterministic() -> Self {
        LabelScheme {
            kind: SchemeKind::Deterministic,
            t: 0.0,
        }
    }

    pub fn probabilistic() -> Self {
        LabelScheme {
            kind: SchemeKind::Probabilistic,
            t: 0.0,
        }
    }

    pub fn transformed(t: f64) -> Result<Self> {
        check_t(t)?;
        Ok(LabelScheme {
            kind: SchemeKind::Transformed,
            t,
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_t(self.t)?;
        if self.kind != SchemeKind::Transformed && self.t != 0.0 {
            return Err(Error::Domain(format!(
                "scheme {} must have t = 0, got {}",
                self.kind, self.t
            )));
        }
        Ok(())
    }
}

fn check_t(t: f64) -> Result<()> {
    if !t.is_finite() || t < 0.0 {
        return Err(Error::Domain(format!("relaxation t must be finite and >= 0, got {t}")));
    }
    Ok(())
}

/// Per-query quality gap summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub query_id: String,
    /// Mean over all cross pairs of `q_small - q_large`.
    pub mean_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub query_id: String,
    pub label: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<crate::router::Features>,
}

fn check_samples(name: &str, xs: &[f64]) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::Domain(format!("{name} sample list is empty")));
    }
    if let Some(v) = xs.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("{name} sample list contains {v}")));
    }
    Ok(())
}

/// Hard label from a single sample per side: 1 iff `q_small >= q_large`.
pub fn label_det(q_small: f64, q_large: f64) -> Result<f64> {
    if !q_small.is_finite() || !q_large.is_finite() {
        return Err(Error::Domain(format!(
            "quality values must be finite, got ({q_small}, {q_large})"
        )));
    }
    Ok(if q_small >= q_large { 1.0 } else { 0.0 })
}

/// Estimate of `Pr[q_small >= q_large]` over all cross pairs.
pub fn label_prob(small: &[f64], large: &[f64]) -> Result<f64> {
    label_trans(small, large, 0.0)
}

/// Estimate of `Pr[q_small >= q_large - t]` over all cross pairs.
pub fn label_trans(small: &[f64], large: &[f64], t: f64) -> Result<f64> {
    check_samples("small", small)?;
    check_samples("large", large)?;
    check_t(t)?;
    Ok(RelaxedLabeler::new(small, large).label(t))
}

/// Reusable label evaluator for one query; sorts the large-side samples
/// once so that each `t` costs `O(|small| log |large|)`.
#[derive(Debug, Clone)]
pub struct RelaxedLabeler {
    small: Vec<f64>,
    large_sorted: Vec<f64>,
}

impl RelaxedLabeler {
    /// Inputs must already be validated (non-empty, finite).
    pub fn new(small: &[f64], large: &[f64]) -> Self {
        let mut large_sorted = large.to_vec();
        large_sorted.sort_by(f64::total_cmp);
        RelaxedLabeler {
            small: small.to_vec(),
            large_sorted,
        }
    }

    pub fn label(&self, t: f64) -> f64 {
        // `l - t` is non-decreasing in `l` under IEEE rounding, so the
        // success predicate is a prefix of the sorted large samples.
        let hits: usize = self
            .small
            .iter()
            .map(|&s| self.large_sorted.partition_point(|&l| s >= l - t))
            .sum();
        hits as f64 / (self.small.len() * self.large_sorted.len()) as f64
    }
}

/// Mean over all cross pairs of `q_small - q_large`.
pub fn mean_gap(small: &[f64], large: &[f64]) -> Result<f64> {
    check_samples("small", small)?;
    check_samples("large", large)?;
    // Equal to the all-pairs mean by linearity.
    Ok(crate::dataset::mean(small) - crate::dataset::mean(large))
}

pub fn gap_estimate(sample: &QuerySample, metric: &str) -> Result<GapEstimate> {
    let (s, l) = sample.pair(metric)?;
    Ok(GapEstimate {
        query_id: sample.id.clone(),
        mean_gap: mean_gap(s, l)?,
    })
}

/// Mean absolute difference over all ordered label pairs, self-pairs included:
/// `(1/N^2) * sum_{i,j} |y_i - y_j|`.
pub fn transform_objective(labels: &[f64]) -> f64 {
    let n = labels.len();
    if n == 0 {
        return 0.0;
    }
    let mut sorted = labels.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Each consecutive gap of the sorted labels is spanned by k * (n - k)
    // unordered pairs; every term is non-negative.
    let half: f64 = sorted
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let k = (i + 1) as f64;
            (w[1] - w[0]) * k * (n as f64 - k)
        })
        .sum();
    2.0 * half / (n as f64 * n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TStarSearch {
    pub t_star: f64,
    pub objective_at_t_star: f64,
    /// `(t, objective)` for every grid point, in grid order.
    pub curve: Vec<(f64, f64)>,
}

pub fn find_t_star(train: &[QuerySample], metric: &str, grid: &[f64]) -> Result<TStarSearch> {
    find_t_star_with(Exec::default(), train, metric, grid)
}

/// Grid search for the relaxation maximizing [`transform_objective`].
/// Ties go to the smallest `t`.
pub fn find_t_star_with(
    exec: Exec,
    train: &[QuerySample],
    metric: &str,
    grid: &[f64],
) -> Result<TStarSearch> {
    if grid.is_empty() {
        return Err(Error::Input("t grid is empty".into()));
    }
    if train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    for &t in grid {
        check_t(t)?;
    }
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Input("t grid must be sorted ascending".into()));
    }
    let labelers = labelers(exec, train, metric)?;
    let curve: Vec<(f64, f64)> = exec.map(grid, |&t| {
        let labels: Vec<f64> = labelers.iter().map(|l| l.label(t)).collect();
        (t, transform_objective(&labels))
    });
    let (mut t_star, mut best) = curve[0];
    for &(t, obj) in &curve[1..] {
        if obj > best {
            t_star = t;
            best = obj;
        }
    }
    Ok(TStarSearch {
        t_star,
        objective_at_t_star: best,
        curve,
    })
}

fn labelers(exec: Exec, samples: &[QuerySample], metric: &str) -> Result<Vec<RelaxedLabeler>> {
    exec.try_map(samples, |q| {
        let (s, l) = q.pair(metric)?;
        check_samples("small", s)?;
        check_samples("large", l)?;
        Ok(RelaxedLabeler::new(s, l))
    })
}

/// Default relaxation grid: evenly spaced points from 0 to the 95th
/// percentile of `q_large - q_small` over all training cross pairs.
/// Collapses to `[0.0]` when that percentile is not positive.
pub fn default_t_grid(train: &[QuerySample], metric: &str) -> Result<Vec<f64>> {
    let mut diffs = Vec::new();
    for q in train {
        let (s, l) = q.pair(metric)?;
        for &qs in s {
            for &ql in l {
                diffs.push(ql - qs);
            }
        }
    }
    if diffs.is_empty() {
        return Err(Error::Input("no quality pairs to build a t grid from".into()));
    }
    diffs.sort_by(f64::total_cmp);
    let upper = quantile_sorted(&diffs, DEFAULT_T_GRID_QUANTILE);
    if !(upper > 0.0) {
        return Ok(vec![0.0]);
    }
    Ok(linspace(0.0, upper, DEFAULT_T_GRID_POINTS))
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let step = (hi - lo) / (n - 1) as f64;
            let mut v: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
            v[n - 1] = hi;
            v
        }
    }
}

/// Linear-interpolation quantile of an ascending slice.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn build_labels(
    train: &[QuerySample],
    metric: &str,
    scheme: LabelScheme,
) -> Result<Vec<LabeledExample>> {
    build_labels_with(Exec::default(), train, metric, scheme)
}

/// One label per query under `scheme`. The deterministic scheme compares
/// the first stored sample of each side.
pub fn build_labels_with(
    exec: Exec,
    train: &[QuerySample],
    metric: &str,
    scheme: LabelScheme,
) -> Result<Vec<LabeledExample>> {
    scheme.validate()?;
    exec.try_map(train, |q| {
        let (s, l) = q.pair(metric)?;
        let label = match scheme.kind {
            SchemeKind::Deterministic => {
                check_samples("small", s)?;
                check_samples("large", l)?;
                label_det(s[0], l[0])?
            }
            SchemeKind::Probabilistic => label_prob(s, l)?,
            SchemeKind::Transformed => label_trans(s, l, scheme.t)?,
        };
        Ok(LabeledExample {
            query_id: q.id.clone(),
            label,
            features: None,
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub query_id: String,
    pub scheme: SchemeKind,
    pub t: f64,
    pub label: f64,
}

/// Writes labels as CSV with header `query_id,scheme,t,label`.
pub fn write_label_records<W: Write>(
    w: W,
    examples: &[LabeledExample],
    scheme: LabelScheme,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for ex in examples {
        wtr.serialize(LabelRecord {
            query_id: ex.query_id.clone(),
            scheme: scheme.kind,
            t: scheme.t,
            label: ex.label,
        })?;
    }
    wtr.flush().map_err(|e| Error::io("<labels>", e))?;
    Ok(())
}

pub fn save_label_records(
    path: impl AsRef<Path>,
    examples: &[LabeledExample],
    scheme: LabelScheme,
) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_label_records(std::io::BufWriter::new(f), examples, scheme)
}

pub fn read_label_records(path: impl AsRef<Path>) -> Result<Vec<LabelRecord>> {
    let mut rdr = csv::Reader::from_path(path.as_ref())?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::test_support::sample;

    /// Direct enumeration of every cross pair; independent of the sorted path.
    fn oracle_trans(s: &[f64], l: &[f64], t: f64) -> f64 {
        let mut hits = 0usize;
        for &a in s {
            for &b in l {
                if a >= b - t {
                    hits += 1;
                }
            }
        }
        hits as f64 / (s.len() * l.len()) as f64
    }

    fn oracle_objective(ys: &[f64]) -> f64 {
        let n = ys.len() as f64;
        let mut acc = 0.0;
        for &a in ys {
            for &b in ys {
                acc += (a - b).abs();
            }
        }
        acc / (n * n)
    }

    #[test]
    fn det_examples() {
        assert_eq!(label_det(-1.0, -2.0).unwrap(), 1.0);
        assert_eq!(label_det(-1.5, -1.5).unwrap(), 1.0);
        assert_eq!(label_det(-3.0, -2.0).unwrap(), 0.0);
        assert!(matches!(label_det(f64::NAN, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn prob_examples() {
        assert_eq!(label_prob(&[-1.0; 3], &[-2.0; 2]).unwrap(), 1.0);
        let s = [-1.0, -2.0, -3.0];
        let l = [-2.5, -1.5];
        assert_eq!(oracle_trans(&s, &l, 0.0), 0.5);
        assert_eq!(label_prob(&s, &l).unwrap(), 0.5);
        assert_eq!(label_prob(&[1.0], &[2.0]).unwrap(), 0.0);
        assert!(matches!(label_prob(&[], &[1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn trans_examples() {
        let s = [-1.0, -2.0, -3.0];
        let l = [-2.5, -1.5];
        assert_eq!(label_trans(&s, &l, 0.0).unwrap(), label_prob(&s, &l).unwrap());
        assert_eq!(oracle_trans(&s, &l, 1.0), 5.0 / 6.0);
        assert_eq!(label_trans(&s, &l, 1.0).unwrap(), 5.0 / 6.0);
        // max(l) - min(s) = 1.5
        assert_eq!(label_trans(&s, &l, 1.6).unwrap(), 1.0);
        assert!(matches!(label_trans(&s, &l, -0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn objective_examples() {
        assert_eq!(transform_objective(&[0.3; 7]), 0.0);
        assert_eq!(transform_objective(&[0.0, 1.0]), 0.5);
        assert_eq!(oracle_objective(&[0.0, 0.5, 1.0]), 4.0 / 9.0);
        assert!((transform_objective(&[0.0, 0.5, 1.0]) - 4.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn t_star_two_query_example() {
        let train = [sample("A", &[0.0], &[0.5]), sample("B", &[1.0], &[0.5])];
        let r = find_t_star(&train, "m", &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(r.t_star, 0.0);
        assert_eq!(r.curve, vec![(0.0, 0.5), (0.5, 0.0), (1.0, 0.0)]);
    }

    #[test]
    fn t_star_degenerate_cases_pick_smallest_t() {
        let same = [sample("a", &[0.0, 1.0], &[0.5]), sample("b", &[0.0, 1.0], &[0.5])];
        let r = find_t_star(&same, "m", &[0.2, 0.4, 0.9]).unwrap();
        assert_eq!(r.t_star, 0.2);
        assert!(r.curve.iter().all(|&(_, o)| o == 0.0));

        let single = [sample("a", &[-3.0, 1.0], &[0.5, 2.0])];
        let r = find_t_star(&single, "m", &[0.1, 1.0]).unwrap();
        assert_eq!(r.t_star, 0.1);
        assert!(r.curve.iter().all(|&(_, o)| o == 0.0));
    }

    #[test]
    fn t_star_rejects_bad_grids() {
        let train = [sample("a", &[0.0], &[0.5])];
        assert!(find_t_star(&train, "m", &[]).is_err());
        assert!(find_t_star(&train, "m", &[1.0, 0.5]).is_err());
        assert!(find_t_star(&[], "m", &[0.0]).is_err());
    }

    #[test]
    fn build_labels_dispatch() {
        let det = build_labels(&[sample("a", &[-1.0, -9.0], &[-2.0])], "m", LabelScheme::deterministic())
            .unwrap();
        assert_eq!(det[0].label, 1.0);
        let six = [sample("a", &[-1.0, -2.0, -3.0], &[-2.5, -1.5])];
        let prob = build_labels(&six, "m", LabelScheme::probabilistic()).unwrap();
        assert_eq!(prob[0].label, 0.5);
        let trans = build_labels(&six, "m", LabelScheme::transformed(0.0).unwrap()).unwrap();
        assert_eq!(trans, prob);
        assert!(matches!(
            build_labels(&six, "other", LabelScheme::probabilistic()),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn default_grid_spans_to_95th_percentile() {
        let train = [sample("a", &[0.0], &[1.0]), sample("b", &[0.0], &[3.0])];
        let g = default_t_grid(&train, "m").unwrap();
        assert_eq!(g.len(), DEFAULT_T_GRID_POINTS);
        assert_eq!(g[0], 0.0);
        assert!((g[g.len() - 1] - 2.9).abs() < 1e-12);
        let easy = [sample("a", &[2.0], &[1.0])];
        assert_eq!(default_t_grid(&easy, "m").unwrap(), vec![0.0]);
    }

    #[test]
    fn label_csv_round_trip() {
        let six = [sample("a,b", &[-1.0, -2.0, -3.0], &[-2.5, -1.5])];
        let ex = build_labels(&six, "m", LabelScheme::probabilistic()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.csv");
        save_label_records(&p, &ex, LabelScheme::probabilistic()).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("query_id,scheme,t,label\n"));
        let back = read_label_records(&p).unwrap();
        assert_eq!(back[0].query_id, "a,b");
        assert_eq!(back[0].label, 0.5);
    }

    fn samples_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..1.0, 1..12)
    }

    proptest! {
        #[test]
        fn trans_matches_enumeration(s in samples_strategy(), l in samples_strategy(), t in 0.0f64..4.0) {
            prop_assert_eq!(label_trans(&s, &l, t).unwrap(), oracle_trans(&s, &l, t));
        }

        #[test]
        fn trans_monotone_and_bounded(s in samples_strategy(), l in samples_strategy(), t1 in 0.0f64..3.0, dt in 0.0f64..3.0) {
            let a = label_trans(&s, &l, t1).unwrap();
            let b = label_trans(&s, &l, t1 + dt).unwrap();
            prop_assert!(a <= b);
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(label_prob(&s, &l).unwrap() <= a);
        }

        #[test]
        fn pair_order_invariance(s in samples_strategy(), l in samples_strategy(), t in 0.0f64..2.0) {
            let mut rs = s.clone();
            rs.reverse();
            let mut rl = l.clone();
            rl.rotate_left(l.len() / 2);
            prop_assert_eq!(label_trans(&s, &l, t).unwrap(), label_trans(&rs, &rl, t).unwrap());
        }

        #[test]
        fn objective_matches_enumeration(ys in prop::collection::vec(0.0f64..=1.0, 1..40)) {
            let fast = transform_objective(&ys);
            let slow = oracle_objective(&ys);
            prop_assert!((fast - slow).abs() < 1e-12);
            prop_assert!((0.0..=0.5 + 1e-15).contains(&fast));
            let mut rev = ys.clone();
            rev.reverse();
            prop_assert_eq!(transform_objective(&rev), fast);
        }
    }
}
