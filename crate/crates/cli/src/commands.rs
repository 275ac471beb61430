use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::path::Path;
use std::time::Instant;

use geoecon::align::{read_pairs, write_pairs, AlignedPair, PairOptions};
use geoecon::dataio::{write_jsonl, CorpusLayout, DataError, SynthConfig};
use geoecon::dataset::{align_period, fit_policies, load_pair_images, load_period, to_samples};
use geoecon::geo::BBox;
use geoecon::model::{r_squared, train as fit, FusionModel, Modality, ModelConfig, TrainConfig, TrainedModel};
use geoecon::pipeline::{run_task, stage_score, Aggregation, PeriodRange, Region, ScoreJob, TaskEnv, TaskSpec};
use geoecon::store::{Store, TaskStatus};
use geoecon_service::ServiceConfig;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{existing, need, need_path, FileConfig};
use crate::{AlignArgs, Cli, CliError, Command, EvalArgs, ModalityArg, PredictArgs, Preset, ServeArgs, SynthArgs, TrainArgs};

/// Files `train` writes next to the checkpoint.
pub const HISTORY_FILE: &str = "history.json";
pub const HOLDOUT_FILE: &str = "holdout.jsonl";
pub const TRAIN_PAIRS_FILE: &str = "train_pairs.jsonl";

pub fn run(cli: Cli) -> Result<String, CliError> {
    let cfg = FileConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Synth(a) => synth(a, &cfg),
        Command::Align(a) => align(a, &cfg),
        Command::Train(a) => train(a, &cfg),
        Command::Predict(a) => predict(a, &cfg),
        Command::Eval(a) => eval(a, &cfg),
        Command::Serve(a) => serve(a, &cfg),
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

/// `flag`, else the config period, else the corpus's last period; it must
/// be one of the corpus periods.
fn pick_period(layout: &CorpusLayout, flag: &Option<String>, cfg: &FileConfig) -> Result<String, CliError> {
    let periods = layout.read_summary()?.periods;
    let period = match flag.clone().or_else(|| cfg.period.clone()) {
        Some(p) => p,
        None => periods.last().cloned().ok_or_else(|| CliError::Runtime("corpus lists no periods".into()))?,
    };
    if !periods.contains(&period) {
        return Err(usage(format!("period {period} is not in the corpus ({})", periods.join(", "))));
    }
    Ok(period)
}

fn corpus_layout(flag: &Option<std::path::PathBuf>, cfg: &FileConfig) -> Result<CorpusLayout, CliError> {
    let root = need_path(flag, &cfg.corpus, "corpus")?;
    let layout = CorpusLayout::new(&root);
    existing(&layout.summary(), "corpus")?;
    Ok(layout)
}

fn synth(a: &SynthArgs, cfg: &FileConfig) -> Result<String, CliError> {
    let mut sc: SynthConfig = cfg.synth.clone().unwrap_or_default();
    if let Some(seed) = a.seed.or(cfg.seed) {
        sc.seed = seed;
    }
    if let Some(n) = a.pairs {
        sc.n_pairs = n;
    }
    if let Some(p) = &a.periods {
        sc.periods = p.clone();
    }
    if let Some(c) = a.counties_per_side {
        sc.counties_per_side = c;
    }
    sc.complementary |= a.complementary;
    sc.validate().map_err(usage)?;
    if a.out.exists() && std::fs::read_dir(&a.out)?.next().is_some() {
        return Err(usage(format!("--out {} is not empty", a.out.display())));
    }
    let t = Instant::now();
    let summary = geoecon::dataio::synth_corpus(&sc, &a.out)?;
    log::info!("corpus written in {:.1?}", t.elapsed());
    Ok(json!({
        "corpus": a.out,
        "seed": sc.seed,
        "periods": summary.periods,
        "satellite_per_period": summary.satellite_per_period,
        "streetview_per_period": summary.streetview_per_period,
    })
    .to_string())
}

fn pair_options(cfg: &FileConfig) -> PairOptions {
    cfg.pairs.unwrap_or_default()
}

fn align(a: &AlignArgs, cfg: &FileConfig) -> Result<String, CliError> {
    let layout = corpus_layout(&a.corpus, cfg)?;
    let period = pick_period(&layout, &a.period, cfg)?;
    let mut opts = pair_options(cfg);
    if let Some(km) = a.max_km {
        opts.max_km = km;
    }
    if let Some(km) = a.window_km {
        opts.window_km = km;
    }
    match a.heading.as_deref() {
        None => {}
        Some("all") => opts.heading = None,
        Some(h) => opts.heading = Some(h.parse().map_err(|_| usage(format!("--heading {h:?} is not a number or `all`")))?),
    }
    if !(opts.max_km.is_finite() && opts.max_km > 0.0 && opts.window_km.is_finite() && opts.window_km > 0.0) {
        return Err(usage("--max-km and --window-km must be positive"));
    }
    let inputs = load_period(&layout, &period)?;
    let outcome = align_period(&inputs, &opts)?;
    write_pairs(&a.out, &outcome.pairs)?;
    Ok(json!({
        "period": period,
        "pairs": outcome.pairs.len(),
        "dropped_no_streetview": outcome.dropped_no_streetview,
        "dropped_too_far": outcome.dropped_too_far,
        "dropped_empty_window": outcome.dropped_empty_window,
        "out": a.out,
    })
    .to_string())
}

/// Contents of `history.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct History {
    pub period: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub history: Vec<geoecon::model::EpochStats>,
    pub label_norm: geoecon::model::LabelNorm,
    pub train_pairs: usize,
    pub holdout_pairs: usize,
    pub seconds: f64,
}

fn train(a: &TrainArgs, cfg: &FileConfig) -> Result<String, CliError> {
    let layout = corpus_layout(&a.corpus, cfg)?;
    let period = pick_period(&layout, &a.period, cfg)?;
    let mut model_cfg = cfg.model.clone().unwrap_or_else(|| match a.preset {
        Preset::Desk => ModelConfig::desk(),
        Preset::Full => ModelConfig::default(),
    });
    if let Some(m) = a.modality {
        model_cfg.modality = match m {
            ModalityArg::Fused => Modality::Fused,
            ModalityArg::SatelliteOnly => Modality::SatelliteOnly,
            ModalityArg::StreetViewOnly => Modality::StreetViewOnly,
        };
    }
    model_cfg.validate().map_err(usage)?;
    let mut tc = cfg.train.clone().unwrap_or_else(|| TrainConfig {
        batch_size: if a.preset == Preset::Desk { 32 } else { 256 },
        ..TrainConfig::default()
    });
    let seed = a.seed.or(cfg.seed).unwrap_or(tc.seed);
    tc.seed = seed;
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    if let Some(b) = a.batch_size {
        tc.batch_size = b;
    }
    if let Some(lr) = a.lr {
        tc.adam.lr = lr;
    }
    if tc.epochs == 0 || tc.batch_size == 0 || !(0.0..1.0).contains(&tc.val_fraction) || !(tc.adam.lr > 0.0) {
        return Err(usage("epochs and batch size must be positive, lr positive, val_fraction in [0, 1)"));
    }

    let t = Instant::now();
    let inputs = load_period(&layout, &period)?;
    let pairs = align_period(&inputs, &pair_options(cfg))?.pairs;
    let images = load_pair_images(&layout, &inputs, &pairs)?;
    let policies = fit_policies(&images, model_cfg.image_side)?;
    let samples = to_samples(&images, &policies);
    log::info!("{} training pairs from {period} loaded in {:.1?}", samples.len(), t.elapsed());

    let mut model = FusionModel::new(model_cfg.clone(), seed)?;
    let report = fit(&mut model, &samples, &tc, |s| {
        log::info!(
            "epoch {} train_mse {:.5} val_mse {} val_r2 {}",
            s.epoch,
            s.train_mse,
            s.val_mse.map_or("-".into(), |v| format!("{v:.5}")),
            s.val_r2.map_or("-".into(), |v| format!("{v:.5}"))
        )
    })?;
    let trained = TrainedModel::new(model, report.label_norm, policies.sat, policies.sv)?;
    trained.save(&a.out)?;

    let val: HashSet<&str> = report.val_ids.iter().map(String::as_str).collect();
    let (holdout, train_pairs): (Vec<AlignedPair>, Vec<AlignedPair>) =
        pairs.into_iter().partition(|p| val.contains(p.sat_id.as_str()));
    write_pairs(&a.out.join(HOLDOUT_FILE), &holdout)?;
    write_pairs(&a.out.join(TRAIN_PAIRS_FILE), &train_pairs)?;
    let final_r2 = report.history.last().and_then(|h| h.val_r2);
    let history = History {
        period,
        seed,
        model: model_cfg,
        train: tc,
        history: report.history,
        label_norm: report.label_norm,
        train_pairs: train_pairs.len(),
        holdout_pairs: holdout.len(),
        seconds: t.elapsed().as_secs_f64(),
    };
    std::fs::write(a.out.join(HISTORY_FILE), serde_json::to_string_pretty(&history)?)?;
    Ok(json!({
        "checkpoint": a.out,
        "epochs": history.history.len(),
        "val_r2": final_r2,
        "train_pairs": history.train_pairs,
        "holdout_pairs": history.holdout_pairs,
        "seconds": history.seconds,
    })
    .to_string())
}

/// Parses `west,south,east,north`.
fn parse_bbox(raw: &str) -> Result<BBox, CliError> {
    let v: Vec<f64> = raw
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("--bbox {raw:?} must be west,south,east,north")))?;
    let [w, s, e, n] = v[..] else {
        return Err(usage(format!("--bbox {raw:?} must be west,south,east,north")));
    };
    BBox::from_bounds(s, w, n, e).map_err(usage)
}

fn parse_period_range(raw: &str) -> PeriodRange {
    match raw.split_once(':') {
        Some((from, to)) => PeriodRange { from: from.into(), to: to.into() },
        None => PeriodRange::single(raw),
    }
}

fn task_spec(a: &PredictArgs, cfg: &FileConfig) -> Result<TaskSpec, CliError> {
    let base: Option<TaskSpec> = match &a.spec {
        Some(p) => {
            existing(p, "spec")?;
            let text = std::fs::read_to_string(p)?;
            Some(serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let t = &cfg.task;
    let region = match (&a.bbox, &a.counties) {
        (Some(b), _) => Some(Region::Bbox(parse_bbox(b)?)),
        (None, Some(c)) => Some(Region::Counties(c.clone())),
        _ => base.as_ref().map(|s| s.region.clone()).or_else(|| t.region.clone()),
    };
    let aggregation = match &a.aggregation {
        Some(raw) => Some(
            serde_json::from_value::<Aggregation>(json!(raw)).map_err(|_| usage(format!("--aggregation {raw:?} is not mean, max or sum")))?,
        ),
        None => None,
    };
    let spec = TaskSpec {
        task_id: need(&a.task_id.clone().or_else(|| base.as_ref().map(|s| s.task_id.clone())), &t.task_id, "task-id")?,
        region: need(&region, &None, "bbox or --counties")?,
        period: need(&a.period.as_deref().map(parse_period_range).or_else(|| base.as_ref().map(|s| s.period.clone())), &t.period, "period")?,
        model: base.as_ref().map(|s| s.model.clone()).or_else(|| t.model.clone()).unwrap_or_else(|| "default".into()),
        worker_count: a.workers.or(base.as_ref().map(|s| s.worker_count)).or(cfg.workers).unwrap_or(1),
        seed: a.seed.or(base.as_ref().map(|s| s.seed)).or(cfg.seed).unwrap_or(0),
        aggregation: aggregation.or(base.as_ref().map(|s| s.aggregation)).or(t.aggregation).unwrap_or_default(),
    };
    spec.validate()?;
    Ok(spec)
}

fn predict(a: &PredictArgs, cfg: &FileConfig) -> Result<String, CliError> {
    let spec = task_spec(a, cfg)?;
    let store_dir = need(&a.store, &cfg.store, "store")?;
    let corpus = corpus_layout(&a.corpus, cfg)?;
    let checkpoint = need_path(&a.checkpoint, &cfg.checkpoint, "checkpoint")?;
    let env = TaskEnv { corpus, models: [("default".to_string(), checkpoint)].into(), pair_options: pair_options(cfg) };
    env.check(&spec)?;
    let store = Store::open(&store_dir)?;
    let report = run_task(&spec, &env, &store)?;
    if let Some(out) = &a.out {
        std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    }
    if report.record.status == TaskStatus::Failed {
        return Err(CliError::Runtime(format!(
            "task {} failed: {}",
            spec.task_id,
            report.record.message.as_deref().unwrap_or("unknown error")
        )));
    }
    Ok(json!({ "task_id": spec.task_id, "status": report.record.status, "stats": report.stats }).to_string())
}

#[derive(Debug, Deserialize)]
struct PredictionLine {
    label: f64,
    prediction: f64,
}

fn eval(a: &EvalArgs, cfg: &FileConfig) -> Result<String, CliError> {
    let (yhat, y, skipped) = match &a.predictions {
        Some(p) => {
            existing(p, "predictions")?;
            let lines: Vec<PredictionLine> = geoecon::dataio::read_jsonl(p)?;
            let (yhat, y) = lines.iter().map(|l| (l.prediction, l.label)).unzip();
            (yhat, y, 0)
        }
        None => score_pairs(a, cfg)?,
    };
    let r2 = r_squared(&yhat, &y)?;
    Ok(format!("r2={r2:?} n={} skipped={skipped}", y.len()))
}

#[derive(Debug, Serialize)]
struct ScoredLine<'a> {
    sat_id: &'a str,
    sv_id: &'a str,
    label: f64,
    prediction: f64,
}

fn score_pairs(a: &EvalArgs, cfg: &FileConfig) -> Result<(Vec<f64>, Vec<f64>, usize), CliError> {
    let checkpoint = need_path(&a.checkpoint, &cfg.checkpoint, "checkpoint")?;
    let pairs_path = need_path(&a.pairs, &None, "pairs or --predictions")?;
    let layout = corpus_layout(&a.corpus, cfg)?;
    let period = match (&a.period, &cfg.period) {
        (None, None) => history_period(&checkpoint).map_or_else(|| pick_period(&layout, &None, cfg), Ok)?,
        _ => pick_period(&layout, &a.period, cfg)?,
    };
    let model = TrainedModel::load(&checkpoint)?;
    let pairs = read_pairs(&pairs_path)?;
    let inputs = load_period(&layout, &period)?;
    let paths: HashMap<&str, std::path::PathBuf> = inputs
        .satellites
        .iter()
        .chain(&inputs.streetviews)
        .map(|r| (r.id.as_str(), layout.resolve(&r.path)))
        .collect();
    let jobs = pairs
        .iter()
        .map(|p| {
            let path = |id: &str| {
                paths.get(id).cloned().ok_or_else(|| {
                    CliError::Usage(format!("pair references {id}, which period {period} of the corpus does not have"))
                })
            };
            Ok(ScoreJob { pair: p.clone(), sat_path: path(&p.sat_id)?, sv_path: path(&p.sv_id)? })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let workers = a.workers.or(cfg.workers).unwrap_or(1);
    let out = stage_score(&jobs, &model, workers, &|_, _| {})?;
    for s in &out.skipped {
        log::warn!("pair of {} skipped: {}", s.sat_id, s.reason);
    }
    if let Some(path) = &a.out {
        let lines: Vec<ScoredLine> = out
            .scored
            .iter()
            .map(|s| ScoredLine { sat_id: &s.pair.sat_id, sv_id: &s.pair.sv_id, label: s.pair.label, prediction: s.score })
            .collect();
        write_jsonl(path, &lines).map_err(|e: DataError| CliError::Runtime(e.to_string()))?;
    }
    let (yhat, y) = out.scored.iter().map(|s| (s.score, s.pair.label)).unzip();
    Ok((yhat, y, out.skipped.len()))
}

/// Period recorded by `train` next to a checkpoint.
fn history_period(checkpoint: &Path) -> Option<String> {
    let text = std::fs::read_to_string(checkpoint.join(HISTORY_FILE)).ok()?;
    serde_json::from_str::<serde_json::Value>(&text).ok()?["period"].as_str().map(String::from)
}

fn serve(a: &ServeArgs, cfg: &FileConfig) -> Result<String, CliError> {
    let store = need(&a.store, &cfg.store, "store")?;
    let corpus = need_path(&a.corpus, &cfg.corpus, "corpus")?;
    let checkpoint = a.checkpoint.clone().or_else(|| cfg.checkpoint.clone());
    if let Some(c) = &checkpoint {
        existing(c, "checkpoint")?;
    } else {
        log::warn!("no --checkpoint: task submissions will be rejected");
    }
    let listen = a.listen.clone().or_else(|| cfg.service.listen.clone()).unwrap_or_else(|| "127.0.0.1:8080".into());
    let mut config = ServiceConfig::new(store, corpus, checkpoint);
    config.listen = listen.parse::<SocketAddr>().map_err(|_| usage(format!("--listen {listen:?} is not host:port")))?;
    config.default_workers = a.workers.or(cfg.workers).unwrap_or(1);
    if config.default_workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    config.cors_origin = a.cors_origin.clone().or_else(|| cfg.service.cors_origin.clone());
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(geoecon_service::serve(config)).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(json!({ "stopped": true }).to_string())
}
