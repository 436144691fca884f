//! Cost advantage, quality drop, tradeoff curves, routing validation and
//! correlation analyses.
//!
//! Per-query quality is the mean of that query's stored samples. Every
//! routed mean is accumulated in sample order, so a curve point and an
//! independent [`mean_quality`] call over the same routing agree bit-for-bit.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::QuerySample;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::policy::{RoutingDecision, RoutingPolicy, Target};

pub const DEFAULT_RANDOM_SEEDS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub threshold: f64,
    pub cost_advantage_pct: f64,
    /// Negative values are improvements over all-at-large.
    pub quality_drop_pct: f64,
}

/// Per-query mean qualities of both models for one metric.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityTable {
    pub small: Vec<f64>,
    pub large: Vec<f64>,
}

impl QualityTable {
    pub fn new(samples: &[QuerySample], metric: &str) -> Result<Self> {
        let mut small = Vec::with_capacity(samples.len());
        let mut large = Vec::with_capacity(samples.len());
        for q in samples {
            let (s, l) = q.mean_pair(metric)?;
            small.push(s);
            large.push(l);
        }
        Ok(QualityTable { small, large })
    }

    pub fn len(&self) -> usize {
        self.small.len()
    }

    pub fn is_empty(&self) -> bool {
        self.small.is_empty()
    }

    pub fn gaps(&self) -> Vec<f64> {
        self.small.iter().zip(&self.large).map(|(s, l)| s - l).collect()
    }

    pub(crate) fn check_scores(&self, scores: &[f64]) -> Result<()> {
        if scores.len() != self.len() {
            return Err(Error::Input(format!(
                "{} scores for {} samples",
                scores.len(),
                self.len()
            )));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::Input("scores contain NaN".into()));
        }
        Ok(())
    }

    pub fn all_large_mean(&self) -> f64 {
        self.routed_mean(|_| Target::Large)
    }

    pub fn all_small_mean(&self) -> f64 {
        self.routed_mean(|_| Target::Small)
    }

    fn routed_mean(&self, target: impl Fn(usize) -> Target) -> f64 {
        let mut sum = 0.0;
        for i in 0..self.len() {
            sum += match target(i) {
                Target::Small => self.small[i],
                Target::Large => self.large[i],
            };
        }
        sum / self.len() as f64
    }

    pub fn mean_for_targets(&self, targets: &[Target]) -> f64 {
        self.routed_mean(|i| targets[i])
    }

    pub fn evaluate_threshold(&self, scores: &[f64], threshold: f64) -> TradeoffPoint {
        let target = |i: usize| crate::policy::decide_learned(threshold, scores[i]);
        let routed = self.routed_mean(target);
        let small = (0..self.len()).filter(|&i| target(i) == Target::Small).count();
        TradeoffPoint {
            threshold,
            cost_advantage_pct: pct(small, self.len()),
            quality_drop_pct: drop_unchecked(routed, self.all_large_mean()),
        }
    }
}

fn pct(k: usize, n: usize) -> f64 {
    100.0 * k as f64 / n as f64
}

fn drop_unchecked(routed: f64, base: f64) -> f64 {
    100.0 * (base - routed) / base.abs()
}

/// Mean over queries of the chosen model's per-query mean quality.
/// `decisions` must cover each sample exactly once (matched by query id).
pub fn mean_quality(decisions: &[RoutingDecision], samples: &[QuerySample], metric: &str) -> Result<f64> {
    let targets = targets_by_sample(decisions, samples)?;
    Ok(QualityTable::new(samples, metric)?.mean_for_targets(&targets))
}

fn targets_by_sample(decisions: &[RoutingDecision], samples: &[QuerySample]) -> Result<Vec<Target>> {
    if samples.is_empty() {
        return Err(Error::Input("no samples to evaluate".into()));
    }
    let mut by_id: HashMap<&str, Target> = HashMap::with_capacity(decisions.len());
    for d in decisions {
        if by_id.insert(d.query_id.as_str(), d.target).is_some() {
            return Err(Error::Input(format!("duplicate decision for {:?}", d.query_id)));
        }
    }
    if by_id.len() != samples.len() {
        return Err(Error::Input(format!(
            "{} decisions for {} samples",
            by_id.len(),
            samples.len()
        )));
    }
    samples
        .iter()
        .map(|q| {
            by_id
                .get(q.id.as_str())
                .copied()
                .ok_or_else(|| Error::Input(format!("no routing decision for {:?}", q.id)))
        })
        .collect()
}

/// `100 * (all_large_mean - routed_mean) / |all_large_mean|`.
pub fn quality_drop_pct(routed_mean: f64, all_large_mean: f64) -> Result<f64> {
    if all_large_mean == 0.0 {
        return Err(Error::UndefinedBaseline);
    }
    Ok(drop_unchecked(routed_mean, all_large_mean))
}

/// Percentage of decisions that go to the small model.
pub fn cost_advantage_pct(decisions: &[RoutingDecision]) -> Result<f64> {
    if decisions.is_empty() {
        return Err(Error::Input("cost advantage of an empty routing".into()));
    }
    let small = decisions.iter().filter(|d| d.target == Target::Small).count();
    Ok(pct(small, decisions.len()))
}

/// Threshold that routes every score to the large model.
pub fn sentinel_above(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max < 1.0 {
        1.0
    } else {
        max + 1.0
    }
}

/// Threshold that routes every score to the small model.
pub fn sentinel_below(scores: &[f64]) -> f64 {
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        0.0
    } else {
        min - 1.0
    }
}

/// Thresholds in descending order: the above-max sentinel, a midpoint
/// between each pair of consecutive distinct scores, and the below-min
/// sentinel. `k` distinct scores give `k + 1` thresholds, one per
/// achievable routing set.
pub fn threshold_grid(scores: &[f64]) -> Vec<f64> {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup();
    let mut grid = Vec::with_capacity(distinct.len() + 1);
    grid.push(sentinel_above(scores));
    for w in distinct.windows(2) {
        let (hi, lo) = (w[0], w[1]);
        let mid = (lo + hi) / 2.0;
        // Any value in [lo, hi) separates the two; fall back to `lo` if the
        // midpoint rounds onto `hi`.
        grid.push(if mid >= lo && mid < hi { mid } else { lo });
    }
    if !distinct.is_empty() {
        grid.push(sentinel_below(scores));
    }
    grid
}

pub fn tradeoff_curve(scores: &[f64], samples: &[QuerySample], metric: &str) -> Result<Vec<TradeoffPoint>> {
    tradeoff_curve_with(Exec::default(), scores, samples, metric)
}

/// Sweeps [`threshold_grid`] and returns points by ascending cost advantage.
pub fn tradeoff_curve_with(
    exec: Exec,
    scores: &[f64],
    samples: &[QuerySample],
    metric: &str,
) -> Result<Vec<TradeoffPoint>> {
    let table = QualityTable::new(samples, metric)?;
    curve_from_table(exec, &table, scores)
}

fn curve_from_table(exec: Exec, table: &QualityTable, scores: &[f64]) -> Result<Vec<TradeoffPoint>> {
    if table.is_empty() {
        return Err(Error::Input("no samples to evaluate".into()));
    }
    table.check_scores(scores)?;
    if table.all_large_mean() == 0.0 {
        return Err(Error::UndefinedBaseline);
    }
    let grid = threshold_grid(scores);
    Ok(exec.map(&grid, |&t| table.evaluate_threshold(scores, t)))
}

/// Linear interpolation of the quality drop at `cost_advantage_pct`.
/// `points` must be sorted by cost advantage.
pub fn drop_at_cost_advantage(points: &[TradeoffPoint], cost_advantage_pct: f64) -> Option<f64> {
    let first = points.first()?;
    let last = points.last()?;
    if cost_advantage_pct < first.cost_advantage_pct || cost_advantage_pct > last.cost_advantage_pct {
        return None;
    }
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        if cost_advantage_pct == a.cost_advantage_pct {
            return Some(a.quality_drop_pct);
        }
        if cost_advantage_pct < b.cost_advantage_pct {
            let f = (cost_advantage_pct - a.cost_advantage_pct) / (b.cost_advantage_pct - a.cost_advantage_pct);
            return Some(a.quality_drop_pct + f * (b.quality_drop_pct - a.quality_drop_pct));
        }
    }
    Some(last.quality_drop_pct)
}

fn gap_difference_targets(gaps: &[f64], targets: &[Target]) -> Option<f64> {
    let (mut s_sum, mut s_n, mut l_sum, mut l_n) = (0.0, 0usize, 0.0, 0usize);
    for (g, t) in gaps.iter().zip(targets) {
        match t {
            Target::Small => {
                s_sum += g;
                s_n += 1;
            }
            Target::Large => {
                l_sum += g;
                l_n += 1;
            }
        }
    }
    if s_n == 0 || l_n == 0 {
        return None;
    }
    Some(s_sum / s_n as f64 - l_sum / l_n as f64)
}

/// Mean quality gap of small-routed queries minus that of large-routed
/// queries. `None` when either side is empty.
pub fn gap_difference(decisions: &[RoutingDecision], samples: &[QuerySample], metric: &str) -> Result<Option<f64>> {
    let targets = targets_by_sample(decisions, samples)?;
    let gaps = QualityTable::new(samples, metric)?.gaps();
    Ok(gap_difference_targets(&gaps, &targets))
}

/// Routes the `round(N * cost_advantage_pct / 100)` highest-scoring
/// queries to the small model (ties by position).
pub fn top_k_targets(scores: &[f64], cost_advantage_pct: f64) -> Vec<Target> {
    let n = scores.len();
    let k = ((n as f64) * cost_advantage_pct / 100.0).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut targets = vec![Target::Large; n];
    for &i in order.iter().take(k.min(n)) {
        targets[i] = Target::Small;
    }
    targets
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapPoint {
    pub cost_advantage_pct: f64,
    pub gap_difference: Option<f64>,
}

pub fn gap_difference_curve(scores: &[f64], gaps: &[f64], levels: &[f64]) -> Vec<GapPoint> {
    levels
        .iter()
        .map(|&c| GapPoint {
            cost_advantage_pct: c,
            gap_difference: gap_difference_targets(gaps, &top_k_targets(scores, c)),
        })
        .collect()
}

/// Sample Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Input(format!("lengths differ: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::UndefinedCorrelation("need at least two points".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the average of their ranks.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Input(format!("lengths differ: {} vs {}", a.len(), b.len())));
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Area under the ROC curve via the rank-sum statistic; ties count one half.
pub fn roc_auc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::Input("scores and labels differ in length".into()));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Input("ROC-AUC needs both classes".into()));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positives).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomPoint {
    pub p_large: f64,
    pub mean_cost_advantage_pct: f64,
    pub mean_drop_pct: f64,
    pub drop_std_err: f64,
    pub mean_gap_difference: Option<f64>,
    pub gap_difference_std_err: Option<f64>,
    pub seeds: usize,
}

fn mean_and_std_err(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Random-routing baseline averaged over `seeds` generators (seeded
/// `base_seed, base_seed + 1, ...`) at each target cost advantage.
pub fn random_baseline(
    exec: Exec,
    samples: &[QuerySample],
    metric: &str,
    cost_levels: &[f64],
    seeds: usize,
    base_seed: u64,
) -> Result<Vec<RandomPoint>> {
    let table = QualityTable::new(samples, metric)?;
    random_baseline_table(exec, &table, cost_levels, seeds, base_seed)
}

fn random_baseline_table(
    exec: Exec,
    table: &QualityTable,
    cost_levels: &[f64],
    seeds: usize,
    base_seed: u64,
) -> Result<Vec<RandomPoint>> {
    if table.is_empty() || seeds == 0 {
        return Err(Error::Input("random baseline needs samples and at least one seed".into()));
    }
    let base = table.all_large_mean();
    if base == 0.0 {
        return Err(Error::UndefinedBaseline);
    }
    let gaps = table.gaps();
    let jobs: Vec<(f64, u64)> = cost_levels
        .iter()
        .flat_map(|&c| (0..seeds as u64).map(move |k| ((1.0 - c / 100.0).clamp(0.0, 1.0), base_seed.wrapping_add(k))))
        .collect();
    let runs: Vec<(f64, f64, Option<f64>)> = exec.try_map(&jobs, |&(p_large, seed)| -> Result<_> {
        let mut d = RoutingPolicy::Random { p_large, rng_seed: seed }.decider()?;
        let targets: Vec<Target> = (0..table.len()).map(|_| d.decide(None)).collect::<Result<_>>()?;
        let small = targets.iter().filter(|t| **t == Target::Small).count();
        Ok((
            pct(small, table.len()),
            drop_unchecked(table.mean_for_targets(&targets), base),
            gap_difference_targets(&gaps, &targets),
        ))
    })?;
    Ok(cost_levels
        .iter()
        .zip(runs.chunks(seeds))
        .map(|(&c, chunk)| {
            let ca: Vec<f64> = chunk.iter().map(|r| r.0).collect();
            let drops: Vec<f64> = chunk.iter().map(|r| r.1).collect();
            let gd: Vec<f64> = chunk.iter().filter_map(|r| r.2).collect();
            let (mean_drop_pct, drop_std_err) = mean_and_std_err(&drops);
            let gap = (!gd.is_empty()).then(|| mean_and_std_err(&gd));
            RandomPoint {
                p_large: (1.0 - c / 100.0).clamp(0.0, 1.0),
                mean_cost_advantage_pct: ca.iter().sum::<f64>() / ca.len() as f64,
                mean_drop_pct,
                drop_std_err,
                mean_gap_difference: gap.map(|g| g.0),
                gap_difference_std_err: gap.map(|g| g.1),
                seeds,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub pearson: f64,
    pub spearman: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub all_small_drop_pct: f64,
    pub all_large_drop_pct: f64,
    pub random_curve: Vec<RandomPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropAt {
    pub cost_advantage_pct: f64,
    pub quality_drop_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub pair_name: String,
    /// Metric the curve is measured under.
    pub metric: String,
    /// Metric the router was trained under.
    pub train_metric: String,
    pub n_queries: usize,
    pub all_large_mean: f64,
    pub all_small_mean: f64,
    pub points: Vec<TradeoffPoint>,
    pub drop_at: Vec<DropAt>,
    pub gap_difference: Vec<GapPoint>,
    pub baselines: Baselines,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlations: Option<Correlations>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOptions {
    pub pair_name: String,
    /// Cost advantages for the gap-difference series and the random curve.
    pub cost_levels: Vec<f64>,
    /// Cost advantages at which the drop is interpolated.
    pub drop_levels: Vec<f64>,
    pub random_seeds: usize,
    pub random_base_seed: u64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            pair_name: "small/large".into(),
            cost_levels: (1..=9).map(|k| 10.0 * k as f64).collect(),
            drop_levels: vec![10.0, 20.0, 40.0],
            random_seeds: DEFAULT_RANDOM_SEEDS,
            random_base_seed: 0,
        }
    }
}

pub fn build_report(
    exec: Exec,
    scores: &[f64],
    samples: &[QuerySample],
    metric: &str,
    opts: &ReportOptions,
) -> Result<EvaluationReport> {
    report_inner(exec, scores, samples, metric, metric, opts)
}

/// Report under `metric_eval` for a router trained under `metric_train`,
/// with Pearson/Spearman correlations between the per-query gaps under
/// the two metrics.
pub fn cross_metric_report(
    exec: Exec,
    scores: &[f64],
    samples: &[QuerySample],
    metric_train: &str,
    metric_eval: &str,
    opts: &ReportOptions,
) -> Result<EvaluationReport> {
    let mut report = report_inner(exec, scores, samples, metric_train, metric_eval, opts)?;
    let g_train = QualityTable::new(samples, metric_train)?.gaps();
    let g_eval = QualityTable::new(samples, metric_eval)?.gaps();
    report.correlations = Some(Correlations {
        pearson: pearson(&g_train, &g_eval)?,
        spearman: spearman(&g_train, &g_eval)?,
    });
    Ok(report)
}

fn report_inner(
    exec: Exec,
    scores: &[f64],
    samples: &[QuerySample],
    metric_train: &str,
    metric_eval: &str,
    opts: &ReportOptions,
) -> Result<EvaluationReport> {
    let table = QualityTable::new(samples, metric_eval)?;
    let points = curve_from_table(exec, &table, scores)?;
    let base = table.all_large_mean();
    let gaps = table.gaps();
    Ok(EvaluationReport {
        pair_name: opts.pair_name.clone(),
        metric: metric_eval.to_string(),
        train_metric: metric_train.to_string(),
        n_queries: table.len(),
        all_large_mean: base,
        all_small_mean: table.all_small_mean(),
        drop_at: opts
            .drop_levels
            .iter()
            .map(|&c| DropAt {
                cost_advantage_pct: c,
                quality_drop_pct: drop_at_cost_advantage(&points, c),
            })
            .collect(),
        points,
        gap_difference: gap_difference_curve(scores, &gaps, &opts.cost_levels),
        baselines: Baselines {
            all_small_drop_pct: drop_unchecked(table.all_small_mean(), base),
            all_large_drop_pct: drop_unchecked(base, base),
            random_curve: random_baseline_table(exec, &table, &opts.cost_levels, opts.random_seeds, opts.random_base_seed)?,
        },
        correlations: None,
    })
}

impl EvaluationReport {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }
}

/// CSV with header `threshold,cost_advantage_pct,quality_drop_pct`.
pub fn write_curve_csv<W: Write>(w: W, points: &[TradeoffPoint]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for p in points {
        wtr.serialize(p)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn save_curve_csv(path: impl AsRef<Path>, points: &[TradeoffPoint]) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_curve_csv(std::io::BufWriter::new(f), points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{route_all, RoutingPolicy};
    use crate::test_support::{sample, sample2};
    use proptest::prelude::*;

    fn decisions(targets: &[(&str, Target)]) -> Vec<RoutingDecision> {
        targets
            .iter()
            .map(|(id, t)| RoutingDecision {
                query_id: id.to_string(),
                target: *t,
                score: None,
            })
            .collect()
    }

    #[test]
    fn mean_quality_examples() {
        let qs = vec![sample("a", &[-1.0, -3.0], &[-1.5]), sample("b", &[-4.0], &[-2.5, -3.5])];
        let all_large = decisions(&[("a", Target::Large), ("b", Target::Large)]);
        assert_eq!(mean_quality(&all_large, &qs, "m").unwrap(), (-1.5 + -3.0) / 2.0);

        let one = vec![sample("a", &[-1.0, -3.0], &[0.0])];
        assert_eq!(mean_quality(&decisions(&[("a", Target::Small)]), &one, "m").unwrap(), -2.0);

        // a -> small (-2.0), b -> large (-3.0)
        let mixed = decisions(&[("b", Target::Large), ("a", Target::Small)]);
        assert_eq!(mean_quality(&mixed, &qs, "m").unwrap(), -2.5);

        assert!(mean_quality(&decisions(&[("a", Target::Small)]), &qs, "m").is_err());
        let dup = decisions(&[("a", Target::Small), ("a", Target::Large)]);
        assert!(mean_quality(&dup, &qs, "m").is_err());
    }

    #[test]
    fn drop_and_cost_examples() {
        assert_eq!(quality_drop_pct(-2.0, -2.0).unwrap(), 0.0);
        assert!((quality_drop_pct(-2.2, -2.0).unwrap() - 10.0).abs() < 1e-12);
        assert!((quality_drop_pct(-1.9, -2.0).unwrap() + 5.0).abs() < 1e-12);
        assert!(matches!(quality_drop_pct(1.0, 0.0), Err(Error::UndefinedBaseline)));

        let mk = |k: usize, n: usize| {
            (0..n)
                .map(|i| RoutingDecision {
                    query_id: i.to_string(),
                    target: if i < k { Target::Small } else { Target::Large },
                    score: None,
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(cost_advantage_pct(&mk(8, 8)).unwrap(), 100.0);
        assert_eq!(cost_advantage_pct(&mk(0, 8)).unwrap(), 0.0);
        assert_eq!(cost_advantage_pct(&mk(2, 8)).unwrap(), 25.0);
        assert!(cost_advantage_pct(&[]).is_err());
    }

    #[test]
    fn curve_counts_and_endpoints() {
        let qs: Vec<_> = (0..5).map(|i| sample(&i.to_string(), &[-2.0 - i as f64 * 0.1], &[-2.0])).collect();
        let scores = [0.9, 0.1, 0.5, 0.3, 0.7];
        let pts = tradeoff_curve(&scores, &qs, "m").unwrap();
        let cas: Vec<f64> = pts.iter().map(|p| p.cost_advantage_pct).collect();
        assert_eq!(cas, vec![0.0, 20.0, 40.0, 60.0, 80.0, 100.0]);
        assert_eq!(pts[0].quality_drop_pct, 0.0);

        let all_small = route_all(&RoutingPolicy::AllSmall, &qs, None).unwrap();
        let small_mean = mean_quality(&all_small, &qs, "m").unwrap();
        let base = QualityTable::new(&qs, "m").unwrap().all_large_mean();
        assert_eq!(pts[5].quality_drop_pct, quality_drop_pct(small_mean, base).unwrap());

        let flat = tradeoff_curve(&[0.4; 5], &qs, "m").unwrap();
        assert_eq!(flat.len(), 2);
        assert_eq!((flat[0].cost_advantage_pct, flat[1].cost_advantage_pct), (0.0, 100.0));
    }

    #[test]
    fn curve_matches_subset_enumeration() {
        let qs = vec![
            sample("a", &[-1.0, -1.2], &[-1.1]),
            sample("b", &[-3.0], &[-2.0, -2.2]),
            sample("c", &[-2.5], &[-2.4]),
        ];
        let scores = [0.2, 0.8, 0.5];
        let pts = tradeoff_curve(&scores, &qs, "m").unwrap();
        // Threshold sweeps induce the nested sets {}, {b}, {b,c}, {a,b,c}.
        let sets: [&[&str]; 4] = [&[], &["b"], &["b", "c"], &["a", "b", "c"]];
        assert_eq!(pts.len(), 4);
        let base = mean_quality(&decisions(&[("a", Target::Large), ("b", Target::Large), ("c", Target::Large)]), &qs, "m").unwrap();
        for (p, set) in pts.iter().zip(sets) {
            let d: Vec<_> = ["a", "b", "c"]
                .iter()
                .map(|id| RoutingDecision {
                    query_id: id.to_string(),
                    target: if set.contains(id) { Target::Small } else { Target::Large },
                    score: None,
                })
                .collect();
            assert_eq!(p.cost_advantage_pct, cost_advantage_pct(&d).unwrap());
            assert_eq!(p.quality_drop_pct, quality_drop_pct(mean_quality(&d, &qs, "m").unwrap(), base).unwrap());
        }
    }

    #[test]
    fn grid_handles_adjacent_floats() {
        let a = 0.5f64;
        let b = f64::from_bits(a.to_bits() + 1);
        let g = threshold_grid(&[a, b]);
        assert_eq!(g.len(), 3);
        assert!(b > g[1] && g[1] >= a);
        assert_eq!(g[0], 1.0);
        assert_eq!(g[2], 0.0);
    }

    #[test]
    fn gap_difference_examples() {
        let qs = vec![sample("a", &[0.0], &[-1.0]), sample("b", &[-1.0], &[0.0])];
        let d = decisions(&[("a", Target::Small), ("b", Target::Large)]);
        assert_eq!(gap_difference(&d, &qs, "m").unwrap(), Some(2.0));
        let all = decisions(&[("a", Target::Small), ("b", Target::Small)]);
        assert_eq!(gap_difference(&all, &qs, "m").unwrap(), None);

        let equal = vec![sample("a", &[0.0], &[-1.0]), sample("b", &[-1.0], &[-2.0])];
        assert_eq!(gap_difference(&d, &equal, "m").unwrap(), Some(0.0));
    }

    #[test]
    fn random_routing_gap_difference_is_centered() {
        let qs: Vec<_> = (0..4000)
            .map(|i| {
                let g = if i % 2 == 0 { 0.5 } else { -0.5 } * ((i % 7) as f64 + 1.0);
                sample(&i.to_string(), &[-2.0 + g], &[-2.0])
            })
            .collect();
        let pts = random_baseline(Exec::default(), &qs, "m", &[30.0, 50.0], 32, 9).unwrap();
        for p in pts {
            let m = p.mean_gap_difference.unwrap();
            let se = p.gap_difference_std_err.unwrap();
            assert!(m.abs() < 3.0 * se, "{m} vs se {se}");
            assert!((p.mean_cost_advantage_pct - (100.0 - 100.0 * p.p_large)).abs() < 2.0);
        }
    }

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.0, 3.0];
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&a, &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-12);
        // cov = 3, var_a = 2, var_b = 14/3 * ... closed form: 3 / sqrt(2 * 4.666..)
        let expected = 3.0 / (2.0f64 * (14.0 / 3.0)).sqrt();
        assert!((pearson(&a, &[1.0, 2.0, 4.0]).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.981_980_506_061_965_7).abs() < 1e-12);
        assert!(matches!(pearson(&a, &[1.0; 3]), Err(Error::UndefinedCorrelation(_))));
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[2.0, 10.0, 11.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap() + 0.5).abs() < 1e-12);
        assert_eq!(average_ranks(&[1.0, 1.0, 2.0]), vec![1.5, 1.5, 3.0]);
        // ranks (1.5,1.5,3) vs (1,2,3): cov = 1.5, var_a = 1.5, var_b = 2
        let expected = 1.5 / (1.5f64 * 2.0).sqrt();
        assert!((spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn roc_auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[true, true, false, false]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert!(roc_auc(&[0.5], &[true]).is_err());
    }

    #[test]
    fn drop_interpolation() {
        let pts = [
            TradeoffPoint { threshold: 1.0, cost_advantage_pct: 0.0, quality_drop_pct: 0.0 },
            TradeoffPoint { threshold: 0.5, cost_advantage_pct: 50.0, quality_drop_pct: 2.0 },
            TradeoffPoint { threshold: 0.0, cost_advantage_pct: 100.0, quality_drop_pct: 10.0 },
        ];
        assert_eq!(drop_at_cost_advantage(&pts, 25.0), Some(1.0));
        assert_eq!(drop_at_cost_advantage(&pts, 50.0), Some(2.0));
        assert_eq!(drop_at_cost_advantage(&pts, 100.0), Some(10.0));
        assert_eq!(drop_at_cost_advantage(&pts, 75.0), Some(6.0));
        assert_eq!(drop_at_cost_advantage(&pts, 101.0), None);
    }

    #[test]
    fn cross_metric_self_comparison() {
        let qs: Vec<_> = (0..20)
            .map(|i| {
                let g = ((i * 7) % 11) as f64 * 0.1;
                sample2(&i.to_string(), &[-2.0 + g], &[-2.0], &[3.0 + 2.0 * g], &[3.5])
            })
            .collect();
        let scores: Vec<f64> = (0..20).map(|i| ((i * 13) % 17) as f64 / 17.0).collect();
        let opts = ReportOptions { random_seeds: 4, ..Default::default() };
        let same = cross_metric_report(Exec::default(), &scores, &qs, "m", "m", &opts).unwrap();
        let plain = build_report(Exec::default(), &scores, &qs, "m", &opts).unwrap();
        assert_eq!(same.points, plain.points);
        let c = same.correlations.unwrap();
        assert!((c.pearson - 1.0).abs() < 1e-12 && (c.spearman - 1.0).abs() < 1e-12);

        // gaps under "g" are a positive affine map of gaps under "m"
        let other = cross_metric_report(Exec::default(), &scores, &qs, "m", "g", &opts).unwrap();
        let c = other.correlations.unwrap();
        assert!((c.pearson - 1.0).abs() < 1e-12);
        let cas = |r: &EvaluationReport| r.points.iter().map(|p| p.cost_advantage_pct).collect::<Vec<_>>();
        assert_eq!(cas(&other), cas(&plain));
        assert_eq!(other.baselines.all_large_drop_pct, 0.0);
    }

    #[test]
    fn csv_header() {
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, &[TradeoffPoint { threshold: 0.5, cost_advantage_pct: 25.0, quality_drop_pct: -0.1 }]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "threshold,cost_advantage_pct,quality_drop_pct\n0.5,25.0,-0.1\n");
    }

    proptest! {
        #[test]
        fn correlation_invariances(
            pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..40),
            scale in 0.1f64..10.0,
            shift in -5.0f64..5.0,
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            if let (Ok(r), Ok(rho)) = (pearson(&a, &b), spearman(&a, &b)) {
                prop_assert!((-1.0..=1.0).contains(&r) && (-1.0..=1.0).contains(&rho));
                let a2: Vec<f64> = a.iter().map(|x| scale * x + shift).collect();
                prop_assert!((pearson(&a2, &b).unwrap() - r).abs() < 1e-9);
                let a3: Vec<f64> = a.iter().map(|x| x.exp()).collect();
                prop_assert!((spearman(&a3, &b).unwrap() - rho).abs() < 1e-12);
            }
        }

        #[test]
        fn sentinels_reproduce_baselines(
            rows in prop::collection::vec((-5.0f64..-0.5, -5.0f64..-0.5, 0.0f64..1.0), 1..12)
        ) {
            let qs: Vec<_> = rows.iter().enumerate().map(|(i, r)| sample(&i.to_string(), &[r.0], &[r.1])).collect();
            let scores: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let table = QualityTable::new(&qs, "m").unwrap();
            let top = table.evaluate_threshold(&scores, sentinel_above(&scores));
            let bottom = table.evaluate_threshold(&scores, sentinel_below(&scores));
            let large = route_all(&RoutingPolicy::AllLarge, &qs, None).unwrap();
            let small = route_all(&RoutingPolicy::AllSmall, &qs, None).unwrap();
            let base = mean_quality(&large, &qs, "m").unwrap();
            prop_assert_eq!(top.quality_drop_pct, 0.0);
            prop_assert_eq!(top.cost_advantage_pct, 0.0);
            prop_assert_eq!(bottom.cost_advantage_pct, 100.0);
            prop_assert_eq!(bottom.quality_drop_pct, quality_drop_pct(mean_quality(&small, &qs, "m").unwrap(), base).unwrap());
        }
    }
}
