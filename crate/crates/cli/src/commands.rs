use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use hyroute_core::evaluation::{self, ReportOptions};
use hyroute_core::labeling::{self, LabelScheme};
use hyroute_core::policy::{self, CalibrationEntry, RoutingPolicy, Target};
use hyroute_core::router::{self, FeatureKind, FeaturizerConfig, TrainConfig};
use hyroute_core::synth::{self, Preset, SynthConfig};
use hyroute_core::{Dataset, Exec, QuerySample, RouterModel, Split};
use hyroute_gateway::{Gateway, GatewayConfig};

use crate::*;

/// Invalid flag values; reported with exit code 2 like parse errors.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

struct Ctx<'a> {
    cli: &'a Cli,
    exec: Exec,
}

impl Ctx<'_> {
    fn out(&self, p: &Path) -> Result<PathBuf> {
        let path = match &self.cli.out_dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        };
        if let Some(parent) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(path)
    }

    fn say(&self, msg: impl fmt::Display) {
        if !self.cli.quiet {
            println!("{msg}");
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let exec = match cli.threads {
        Some(0) => return Err(usage("--threads must be at least 1")),
        Some(1) => Exec::Sequential,
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .context("configuring worker threads")?;
            Exec::Parallel
        }
        None => Exec::default(),
    };
    let ctx = Ctx { cli, exec };
    match &cli.command {
        Command::Synth(a) => synth_cmd(&ctx, a),
        Command::Labels(a) => labels_cmd(&ctx, a),
        Command::FindT(a) => find_t_cmd(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Calibrate(a) => calibrate_cmd(&ctx, a),
        Command::Evaluate(a) => evaluate_cmd(&ctx, a),
        Command::Route(a) => route_cmd(&ctx, a),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Validation => Split::Validation,
        SplitArg::Test => Split::Test,
    }
}

fn load(data: &DataArgs) -> Result<Dataset> {
    let ds = Dataset::load(&data.dataset, None).with_context(|| format!("loading {}", data.dataset.display()))?;
    if !ds.declared_metrics.contains(&data.metric) {
        bail!(
            "dataset {} has no metric {:?} (available: {:?})",
            data.dataset.display(),
            data.metric,
            ds.declared_metrics
        );
    }
    Ok(ds)
}

fn nonempty(ds: &Dataset, split: Split) -> Result<Vec<QuerySample>> {
    let v = ds.split(split);
    if v.is_empty() {
        bail!("dataset has no {split} records");
    }
    Ok(v)
}

fn parse_grid(spec: &str) -> Result<Option<Vec<f64>>> {
    if spec == "auto" {
        return Ok(None);
    }
    let grid = spec
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| usage(format!("--t-grid value {v:?}: {e}"))))
        .collect::<Result<Vec<f64>>>()?;
    if grid.is_empty() || grid.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(usage("--t-grid values must be finite and >= 0"));
    }
    Ok(Some(grid))
}

fn grid_for(train: &[QuerySample], metric: &str, explicit: Option<Vec<f64>>) -> Result<Vec<f64>> {
    Ok(match explicit {
        Some(g) => g,
        None => labeling::default_t_grid(train, metric)?,
    })
}

fn check_scheme_args(a: &SchemeArgs) -> Result<Option<Vec<f64>>> {
    if let Some(t) = a.t {
        if a.scheme != SchemeArg::Trans {
            return Err(usage("--t only applies to --scheme trans"));
        }
        if !t.is_finite() || t < 0.0 {
            return Err(usage(format!("--t must be finite and >= 0, got {t}")));
        }
    }
    parse_grid(&a.t_grid)
}

/// Resolves the scheme, running the relaxation search for `trans` without `--t`.
fn resolve_scheme(
    ctx: &Ctx,
    a: &SchemeArgs,
    grid: Option<Vec<f64>>,
    train: &[QuerySample],
    metric: &str,
) -> Result<LabelScheme> {
    Ok(match (a.scheme, a.t) {
        (SchemeArg::Det, _) => LabelScheme::deterministic(),
        (SchemeArg::Prob, _) => LabelScheme::probabilistic(),
        (SchemeArg::Trans, Some(t)) => LabelScheme::transformed(t)?,
        (SchemeArg::Trans, None) => {
            let grid = grid_for(train, metric, grid)?;
            let search = labeling::find_t_star_with(ctx.exec, train, metric, &grid)?;
            ctx.say(format_args!(
                "t* = {} (objective {})",
                search.t_star, search.objective_at_t_star
            ));
            LabelScheme::transformed(search.t_star)?
        }
    })
}

fn synth_cmd(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    if a.samples_per_side == 0 {
        return Err(usage("--samples-per-side must be at least 1"));
    }
    let preset = match a.preset {
        PresetArg::Separable => Preset::Separable,
        PresetArg::GapCorrelated => Preset::GapCorrelated,
        PresetArg::SymmetricRandom => Preset::SymmetricRandom,
    };
    let cfg = SynthConfig {
        samples_per_side: a.samples_per_side,
        ..SynthConfig::new(preset, a.n, ctx.cli.seed)
    };
    let ds = synth::synth_with(&cfg)?;
    let out = ctx.out(&a.out)?;
    ds.save(&out)?;
    ctx.say(format_args!("wrote {} {preset} queries to {}", ds.samples.len(), out.display()));
    Ok(())
}

fn labels_cmd(ctx: &Ctx, a: &LabelsArgs) -> Result<()> {
    let grid = check_scheme_args(&a.scheme)?;
    let ds = load(&a.data)?;
    let samples = nonempty(&ds, split_of(a.split))?;
    let scheme = resolve_scheme(ctx, &a.scheme, grid, &samples, &a.data.metric)?;
    let examples = labeling::build_labels_with(ctx.exec, &samples, &a.data.metric, scheme)?;
    let out = ctx.out(&a.out)?;
    labeling::save_label_records(&out, &examples, scheme)?;
    let mean = examples.iter().map(|e| e.label).sum::<f64>() / examples.len() as f64;
    ctx.say(format_args!(
        "wrote {} {} labels (t = {}, mean {mean:.4}) to {}",
        examples.len(),
        scheme.kind,
        scheme.t,
        out.display()
    ));
    Ok(())
}

fn find_t_cmd(ctx: &Ctx, a: &FindTArgs) -> Result<()> {
    let grid = parse_grid(&a.t_grid)?;
    let ds = load(&a.data)?;
    let train = nonempty(&ds, Split::Train)?;
    let grid = grid_for(&train, &a.data.metric, grid)?;
    let search = labeling::find_t_star_with(ctx.exec, &train, &a.data.metric, &grid)?;
    let out = ctx.out(&a.out)?;
    write_json(&out, &search)?;
    ctx.say(format_args!(
        "t* = {} (objective {}) over {} grid points; wrote {}",
        search.t_star,
        search.objective_at_t_star,
        grid.len(),
        out.display()
    ));
    Ok(())
}

fn train_cmd(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let grid = check_scheme_args(&a.scheme)?;
    if a.epochs == 0 {
        return Err(usage("--epochs must be at least 1"));
    }
    if !(a.lr.is_finite() && a.lr > 0.0) {
        return Err(usage("--lr must be positive"));
    }
    if !(a.l2.is_finite() && a.l2 >= 0.0) {
        return Err(usage("--l2 must be >= 0"));
    }
    if a.batch_size == 0 {
        return Err(usage("--batch-size must be at least 1"));
    }
    let ds = load(&a.data)?;
    let featurizer = match a.featurizer {
        FeaturizerArg::Hashed => FeaturizerConfig {
            kind: FeatureKind::HashedNgrams,
            dim: a.dim,
            ngram_range: (a.ngram_min, a.ngram_max),
            hash_seed: a.hash_seed,
            lowercase: !a.case_sensitive,
        },
        FeaturizerArg::Embedding => {
            let dim = ds
                .embedding_dim
                .context("--featurizer embedding needs a dataset with embeddings")?;
            FeaturizerConfig::embedding(dim)
        }
    };
    featurizer.validate().map_err(|e| usage(e.to_string()))?;

    let metric = &a.data.metric;
    let train = nonempty(&ds, Split::Train)?;
    let scheme = resolve_scheme(ctx, &a.scheme, grid, &train, metric)?;
    let labelled = |samples: &[QuerySample]| -> Result<Vec<hyroute_core::LabeledExample>> {
        let mut ex = labeling::build_labels_with(ctx.exec, samples, metric, scheme)?;
        router::attach_features(ctx.exec, &featurizer, &mut ex, samples)?;
        Ok(ex)
    };
    let examples = labelled(&train)?;
    let hyper = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        l2: a.l2,
        batch_size: a.batch_size,
        seed: ctx.cli.seed,
    };
    let model = if a.select_checkpoint {
        let val = nonempty(&ds, Split::Validation)?;
        let val_examples = labelled(&val)?;
        router::train_with_validation(&examples, &val_examples, &featurizer, scheme, metric, &hyper)?
    } else {
        router::train(&examples, &featurizer, scheme, metric, &hyper)?
    };
    let out = ctx.out(&a.out)?;
    model.save(&out)?;
    ctx.say(format_args!(
        "trained {} router on {} queries (final loss {:.6}); wrote {}",
        scheme.kind,
        examples.len(),
        model.training_meta.final_loss,
        out.display()
    ));
    Ok(())
}

fn calibrate_cmd(ctx: &Ctx, a: &CalibrateArgs) -> Result<()> {
    if !a.max_drop_pct.is_finite() {
        return Err(usage("--max-drop-pct must be finite"));
    }
    if a.val_samples == 0 {
        return Err(usage("--val-samples must be at least 1"));
    }
    let mut model = RouterModel::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let ds = load(&a.data)?;
    let pool = nonempty(&ds, split_of(a.split))?;
    let val: Vec<QuerySample> = policy::subsample_indices(pool.len(), a.val_samples, ctx.cli.seed)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect();
    let scores = model.score_all(ctx.exec, &val)?;
    let cal = policy::calibrate_threshold_with(ctx.exec, &val, &scores, &a.data.metric, a.max_drop_pct, None)?;
    if !cal.feasible {
        tracing::warn!(
            "no threshold meets a {}% drop budget; storing the all-at-large threshold",
            a.max_drop_pct
        );
    }
    model.upsert_threshold(CalibrationEntry::new(
        &a.data.metric,
        a.max_drop_pct,
        cal,
        val.len(),
        Some(ctx.cli.seed),
    ));
    let out = match &a.out {
        Some(p) => ctx.out(p)?,
        None => a.model.clone(),
    };
    model.save(&out)?;
    ctx.say(format_args!(
        "threshold {} on {} validation queries: cost advantage {:.2}%, drop {:.4}%{}; wrote {}",
        cal.threshold,
        val.len(),
        cal.achieved_cost_advantage_pct,
        cal.achieved_drop_pct,
        if cal.feasible { "" } else { " (infeasible)" },
        out.display()
    ));
    Ok(())
}

fn evaluate_cmd(ctx: &Ctx, a: &EvaluateArgs) -> Result<()> {
    if a.random_seeds == 0 {
        return Err(usage("--random-seeds must be at least 1"));
    }
    let model = RouterModel::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let ds = load(&a.data)?;
    let samples = nonempty(&ds, split_of(a.split))?;
    let scores = model.score_all(ctx.exec, &samples)?;
    let opts = ReportOptions {
        pair_name: a.pair_name.clone(),
        random_seeds: a.random_seeds,
        random_base_seed: ctx.cli.seed,
        ..Default::default()
    };
    let report = match &a.eval_metric {
        Some(m) if m != &a.data.metric => {
            if !ds.declared_metrics.contains(m) {
                bail!("dataset has no metric {m:?}");
            }
            evaluation::cross_metric_report(ctx.exec, &scores, &samples, &a.data.metric, m, &opts)?
        }
        _ => evaluation::build_report(ctx.exec, &scores, &samples, &a.data.metric, &opts)?,
    };
    let out = ctx.out(&a.out)?;
    report.save_json(&out)?;
    if let Some(csv) = &a.csv {
        evaluation::save_curve_csv(ctx.out(csv)?, &report.points)?;
    }
    for d in &report.drop_at {
        ctx.say(format_args!(
            "drop at {}% cost advantage: {}",
            d.cost_advantage_pct,
            d.quality_drop_pct.map_or("n/a".to_string(), |v| format!("{v:.4}%"))
        ));
    }
    ctx.say(format_args!("wrote {}", out.display()));
    Ok(())
}

fn route_cmd(ctx: &Ctx, a: &RouteArgs) -> Result<()> {
    if let Some(t) = a.threshold {
        if t.is_nan() {
            return Err(usage("--threshold must not be NaN"));
        }
    }
    let model = match (a.policy, &a.model) {
        (PolicyArg::Learned, None) => return Err(usage("--policy learned needs --model")),
        (PolicyArg::Learned, Some(p)) => {
            Some(RouterModel::load(p).with_context(|| format!("loading {}", p.display()))?)
        }
        _ => None,
    };
    let policy = match a.policy {
        PolicyArg::Learned => {
            let m = model.as_ref().expect("learned policy has a model");
            let threshold = match a.threshold {
                Some(t) => t,
                None => m
                    .threshold_for(&a.metric, a.max_drop_pct)
                    .map(|e| e.threshold)
                    .with_context(|| {
                        format!("model has no calibrated threshold for {:?}; pass --threshold or run calibrate", a.metric)
                    })?,
            };
            RoutingPolicy::Learned { threshold }
        }
        PolicyArg::AllSmall => RoutingPolicy::AllSmall,
        PolicyArg::AllLarge => RoutingPolicy::AllLarge,
        PolicyArg::Random => RoutingPolicy::Random {
            p_large: a.p_large.ok_or_else(|| usage("--policy random needs --p-large"))?,
            rng_seed: ctx.cli.seed,
        },
    };
    policy.validate().map_err(|e| usage(e.to_string()))?;

    let ds = Dataset::load(&a.dataset, None).with_context(|| format!("loading {}", a.dataset.display()))?;
    let samples = nonempty(&ds, split_of(a.split))?;
    let scores = match &model {
        Some(m) => Some(m.score_all(ctx.exec, &samples)?),
        None => None,
    };
    let decisions = policy::route_all(&policy, &samples, scores.as_deref())?;
    let out = ctx.out(&a.out)?;
    let f = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = BufWriter::new(f);
    for d in &decisions {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let small = decisions.iter().filter(|d| d.target == Target::Small).count();
    ctx.say(format_args!(
        "routed {} queries: {small} small, {} large; cost advantage {}%",
        decisions.len(),
        decisions.len() - small,
        evaluation::cost_advantage_pct(&decisions)?
    ));
    ctx.say(format_args!("wrote {}", out.display()));
    Ok(())
}

fn serve_cmd(a: &ServeArgs) -> Result<()> {
    let cfg = GatewayConfig::load(&a.config)?;
    let gw = Arc::new(Gateway::from_config(&cfg)?);
    let addr = cfg.listen_addr()?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        };
        hyroute_gateway::server::serve(gw, listener, shutdown).await?;
        Ok(())
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
