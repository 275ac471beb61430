//! The staged scoring job: read manifests, align and score pairs, keep the
//! maximum per cell, aggregate cells to counties. Results are committed to
//! the store in one transaction, so a task is persisted whole or not at all.

mod stages;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::align::{build_pairs, AlignError, PairOptions};
use crate::dataio::{read_counties, CorpusLayout, DataError, ImageRecord};
use crate::dataset::load_period;
use crate::geo::{BBox, CountyPolygon, GeoError};
use crate::model::{ModelError, TrainedModel};
use crate::store::{
    new_task, FineGrainedRow, FrameRecord, FrameStatus, Store, StoreError, TaskRecord, TaskStatus, Write,
};

pub use crate::store::{Level, Stage, TaskEvent};
pub use stages::{
    expand_bbox, filter_region, stage_aggregate, stage_read, stage_reduce_max, stage_score, AggregateOutcome,
    Aggregation, CellScore, CountyScore, ReadSlice, ScoreJob, ScoreOutcome, ScoredPair, SkippedPair,
};

/// Upper bound on `worker_count`.
pub const MAX_WORKERS: usize = 256;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid task: {0}")]
    InvalidSpec(String),
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Bbox(BBox),
    /// County ids from the corpus county file.
    Counties(Vec<String>),
}

/// Inclusive range of period labels (`YYYY` or `YYYY-MM`), compared as text.
/// Deserializes from `{"from": .., "to": ..}` or a single label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PeriodRange {
    pub from: String,
    pub to: String,
}

impl PeriodRange {
    pub fn single(period: impl Into<String>) -> Self {
        let p = period.into();
        PeriodRange { from: p.clone(), to: p }
    }

    pub fn contains(&self, period: &str) -> bool {
        self.from.as_str() <= period && period <= self.to.as_str()
    }
}

impl<'de> Deserialize<'de> for PeriodRange {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Input {
            Single(String),
            Range { from: String, to: String },
        }
        Ok(match Input::deserialize(d)? {
            Input::Single(p) => PeriodRange::single(p),
            Input::Range { from, to } => PeriodRange { from, to },
        })
    }
}

/// True for `YYYY` and `YYYY-MM` labels.
pub fn is_period_label(p: &str) -> bool {
    let b = p.as_bytes();
    let year = b.len() >= 4 && b[..4].iter().all(u8::is_ascii_digit);
    match b.len() {
        4 => year,
        7 => year && b[4] == b'-' && b[5..].iter().all(u8::is_ascii_digit) && (b"01"..=b"12").contains(&&[b[5], b[6]]),
        _ => false,
    }
}

fn default_model() -> String {
    "default".into()
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub region: Region,
    pub period: PeriodRange,
    /// Name of a registered checkpoint.
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "one")]
    pub worker_count: usize,
    /// Recorded for provenance; scoring itself draws no randomness.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub aggregation: Aggregation,
}

impl TaskSpec {
    /// Checks that need no corpus or model.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let invalid = |m: String| Err(PipelineError::InvalidSpec(m));
        let id_ok = !self.task_id.is_empty()
            && self.task_id.len() <= 128
            && self.task_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
        if !id_ok {
            return invalid(format!("task id {:?} must be 1-128 characters of [A-Za-z0-9._-]", self.task_id));
        }
        match &self.region {
            Region::Bbox(b) => {
                b.min.validate()?;
                b.max.validate()?;
                if b.min.lat > b.max.lat || b.min.lon > b.max.lon || b.is_degenerate() {
                    return invalid("region bounding box is empty".into());
                }
            }
            Region::Counties(ids) if ids.is_empty() => return invalid("region lists no counties".into()),
            Region::Counties(_) => {}
        }
        for p in [&self.period.from, &self.period.to] {
            if !is_period_label(p) {
                return invalid(format!("period {p:?} is not YYYY or YYYY-MM"));
            }
        }
        if self.period.from > self.period.to {
            return invalid(format!("period range {}..{} is reversed", self.period.from, self.period.to));
        }
        if !(1..=MAX_WORKERS).contains(&self.worker_count) {
            return invalid(format!("worker count {} outside 1..={MAX_WORKERS}", self.worker_count));
        }
        Ok(())
    }
}

/// Where a task finds its corpus and models.
#[derive(Debug, Clone)]
pub struct TaskEnv {
    pub corpus: CorpusLayout,
    /// Checkpoint directories by model name.
    pub models: BTreeMap<String, PathBuf>,
    pub pair_options: PairOptions,
}

impl TaskEnv {
    /// Environment with `checkpoint`, when given, registered as `"default"`.
    pub fn new(corpus_root: &Path, checkpoint: Option<&Path>) -> Self {
        let models = checkpoint.map(|c| ("default".to_string(), c.to_path_buf())).into_iter().collect();
        TaskEnv { corpus: CorpusLayout::new(corpus_root), models, pair_options: PairOptions::default() }
    }

    pub fn resolve_model(&self, name: &str) -> Result<&Path, PipelineError> {
        self.models.get(name).map(PathBuf::as_path).ok_or_else(|| PipelineError::UnknownModel(name.to_string()))
    }

    /// Corpus periods inside `range`, ascending.
    pub fn periods(&self, range: &PeriodRange) -> Result<Vec<String>, PipelineError> {
        let summary = self.corpus.read_summary()?;
        let mut periods: Vec<String> = summary.periods.into_iter().filter(|p| range.contains(p)).collect();
        periods.sort();
        Ok(periods)
    }

    pub fn counties(&self) -> Result<Vec<CountyPolygon>, PipelineError> {
        Ok(read_counties(&self.corpus.counties())?)
    }

    /// Region box and the counties aggregated into.
    fn resolve_region(&self, region: &Region) -> Result<(BBox, Vec<CountyPolygon>), PipelineError> {
        let counties = self.counties()?;
        match region {
            Region::Bbox(b) => Ok((*b, counties)),
            Region::Counties(ids) => {
                let by_id: HashMap<&str, &CountyPolygon> = counties.iter().map(|c| (c.county_id.as_str(), c)).collect();
                let mut chosen = Vec::new();
                for id in ids.iter().collect::<BTreeSet<_>>() {
                    let c = by_id
                        .get(id.as_str())
                        .ok_or_else(|| PipelineError::InvalidSpec(format!("unknown county {id:?}")))?;
                    chosen.push((*c).clone());
                }
                let bbox = BBox::enclosing(chosen.iter().flat_map(|c| c.ring.iter()))
                    .ok_or_else(|| PipelineError::InvalidSpec("region lists no counties".into()))?;
                Ok((bbox, chosen))
            }
        }
    }

    /// Every check that can reject a task before it is queued.
    pub fn check(&self, spec: &TaskSpec) -> Result<(), PipelineError> {
        spec.validate()?;
        self.resolve_model(&spec.model)?;
        self.resolve_region(&spec.region)?;
        if self.periods(&spec.period)?.is_empty() {
            return Err(PipelineError::InvalidSpec(format!(
                "no corpus period within {}..{}",
                spec.period.from, spec.period.to
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub periods: usize,
    pub satellites: usize,
    pub pairs: usize,
    pub scored: usize,
    pub skipped: usize,
    pub cells: usize,
    pub county_scores: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskReport {
    /// Terminal record: succeeded, or failed with a message.
    pub record: TaskRecord,
    pub stats: TaskStats,
}

/// Writes events for one task, keeping each stage's progress monotone.
struct Emitter<'a> {
    store: &'a Store,
    task_id: &'a str,
    progress: Mutex<BTreeMap<Stage, f64>>,
}

impl Emitter<'_> {
    fn emit(&self, stage: Stage, level: Level, progress: f64, message: String) {
        let mut last = self.progress.lock().unwrap_or_else(|e| e.into_inner());
        let p = progress.clamp(0.0, 1.0).max(last.get(&stage).copied().unwrap_or(0.0));
        last.insert(stage, p);
        log::info!(target: "pipeline", "{} {:?} {:.3} {}", self.task_id, stage, p, message);
        if let Err(e) = self.store.append_event(self.task_id, stage, level, message, p) {
            log::warn!("cannot record event for {}: {e}", self.task_id);
        }
    }

    fn current_stage(&self) -> Stage {
        let last = self.progress.lock().unwrap_or_else(|e| e.into_inner());
        last.keys().next_back().copied().unwrap_or(Stage::Read)
    }
}

struct Results {
    writes: Vec<Write>,
    stats: TaskStats,
}

/// Marks the task running, creating it when new. A finished task restarts
/// with its events cleared; its previous results stay visible until the new
/// run commits.
fn begin(store: &Store, spec: &TaskSpec) -> Result<(), PipelineError> {
    let snapshot = serde_json::to_value(spec).expect("task spec serializes");
    match store.task(&spec.task_id) {
        None => {
            let record = new_task(&spec.task_id, snapshot);
            let running = record.with_status(TaskStatus::Running, None);
            store.commit(vec![Write::CreateTask(record), Write::UpdateTask(running)])?;
        }
        Some(t) => {
            let running = TaskRecord { spec: snapshot, ..t.with_status(TaskStatus::Running, None) };
            store.commit(vec![
                Write::ClearTask { task_id: spec.task_id.clone(), results: false, events: true },
                Write::UpdateTask(running),
            ])?;
        }
    }
    Ok(())
}

/// Runs a task to a terminal state. Stage failures are recorded as a failed
/// task with no results and returned in the report; `Err` means the spec was
/// rejected or the store could not record the outcome.
pub fn run_task(spec: &TaskSpec, env: &TaskEnv, store: &Store) -> Result<TaskReport, PipelineError> {
    spec.validate()?;
    begin(store, spec)?;
    let emitter = Emitter { store, task_id: &spec.task_id, progress: Mutex::new(BTreeMap::new()) };
    let running = store.task(&spec.task_id).expect("task was just written");
    match execute(spec, env, &emitter) {
        Ok(results) => {
            let mut writes = vec![Write::ClearTask { task_id: spec.task_id.clone(), results: true, events: false }];
            writes.extend(results.writes);
            let record = running.with_status(TaskStatus::Succeeded, None);
            writes.push(Write::UpdateTask(record.clone()));
            store.commit(writes)?;
            Ok(TaskReport { record, stats: results.stats })
        }
        Err(e) => {
            let message = e.to_string();
            let stage = emitter.current_stage();
            emitter.emit(stage, Level::Error, 0.0, format!("task failed: {message}"));
            let record = running.with_status(TaskStatus::Failed, Some(message));
            store.commit(vec![
                Write::ClearTask { task_id: spec.task_id.clone(), results: true, events: false },
                Write::UpdateTask(record.clone()),
            ])?;
            Ok(TaskReport { record, stats: TaskStats::default() })
        }
    }
}

fn score_jobs(
    env: &TaskEnv,
    records: &[ImageRecord],
    pairs: &[crate::align::AlignedPair],
) -> Result<Vec<ScoreJob>, PipelineError> {
    let by_id: HashMap<&str, &ImageRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    pairs
        .iter()
        .map(|p| {
            let path = |id: &str| {
                by_id
                    .get(id)
                    .map(|r| env.corpus.resolve(&r.path))
                    .ok_or_else(|| PipelineError::InvalidSpec(format!("pair references unknown record {id}")))
            };
            Ok(ScoreJob { pair: p.clone(), sat_path: path(&p.sat_id)?, sv_path: path(&p.sv_id)? })
        })
        .collect()
}

fn execute(spec: &TaskSpec, env: &TaskEnv, out: &Emitter<'_>) -> Result<Results, PipelineError> {
    out.emit(Stage::Read, Level::Info, 0.0, format!("task {} started", spec.task_id));
    let model = TrainedModel::load(env.resolve_model(&spec.model)?)?;
    let (region, counties) = env.resolve_region(&spec.region)?;
    let periods = env.periods(&spec.period)?;
    if periods.is_empty() {
        return Err(PipelineError::InvalidSpec(format!(
            "no corpus period within {}..{}",
            spec.period.from, spec.period.to
        )));
    }
    let n = periods.len() as f64;
    let task = spec.task_id.as_str();
    let mut writes = Vec::new();
    let mut stats = TaskStats { periods: periods.len(), ..TaskStats::default() };

    for (i, period) in periods.iter().enumerate() {
        let at = |f: f64| (i as f64 + f) / n;
        let inputs = load_period(&env.corpus, period)?;
        let slice = stage_read(&inputs, &region, env.pair_options.max_km);
        out.emit(
            Stage::Read,
            Level::Info,
            at(1.0),
            format!("{period}: {} satellite tiles and {} street views in region", slice.satellites.len(), slice.streetviews.len()),
        );

        let aligned = build_pairs(&slice.satellites, &slice.streetviews, &inputs.raster, &env.pair_options)?;
        out.emit(
            Stage::Score,
            Level::Info,
            at(0.0),
            format!(
                "{period}: {} pairs aligned ({} without a street view within range, {} too far, {} empty label windows)",
                aligned.pairs.len(),
                aligned.dropped_no_streetview,
                aligned.dropped_too_far,
                aligned.dropped_empty_window
            ),
        );
        let records: Vec<ImageRecord> = slice.satellites.iter().chain(&slice.streetviews).cloned().collect();
        let jobs = score_jobs(env, &records, &aligned.pairs)?;
        let last_step = Mutex::new(0usize);
        let report = |done: usize, total: usize| {
            // at most one event per tenth of the period's pairs
            let step = done * 10 / total;
            let mut last = last_step.lock().unwrap_or_else(|e| e.into_inner());
            if step > *last {
                *last = step;
                out.emit(Stage::Score, Level::Info, at(done as f64 / total as f64), format!("{period}: scored {done}/{total} pairs"));
            }
        };
        let scored = stage_score(&jobs, &model, spec.worker_count, &report)?;
        if !scored.skipped.is_empty() {
            out.emit(
                Stage::Score,
                Level::Warn,
                at(1.0),
                format!("{period}: {} pairs skipped, first: {}", scored.skipped.len(), scored.skipped[0].reason),
            );
        }
        out.emit(Stage::Score, Level::Info, at(1.0), format!("{period}: {} pairs scored", scored.scored.len()));

        let cells = stage_reduce_max(&scored.scored);
        out.emit(Stage::Reduce, Level::Info, at(1.0), format!("{period}: {} cells from {} pairs", cells.len(), scored.scored.len()));

        let agg = stage_aggregate(&cells, &counties, period, spec.aggregation)?;
        if !agg.omitted.is_empty() {
            out.emit(
                Stage::Aggregate,
                Level::Warn,
                at(1.0),
                format!("{period}: {} counties hold no cell and were omitted", agg.omitted.len()),
            );
        }
        out.emit(Stage::Aggregate, Level::Info, at(1.0), format!("{period}: {} county values", agg.scores.len()));

        let scored_ids: BTreeSet<&str> = scored.scored.iter().map(|s| s.pair.sat_id.as_str()).collect();
        let skipped_ids: BTreeSet<&str> = scored.skipped.iter().map(|s| s.sat_id.as_str()).collect();
        let mut frames: BTreeMap<crate::geo::TileId, (FrameStatus, usize)> = BTreeMap::new();
        for sat in &slice.satellites {
            let tile = crate::geo::latlon_to_tile(&sat.location, crate::geo::SYSTEM_ZOOM)?;
            let (status, count) = if scored_ids.contains(sat.id.as_str()) {
                (FrameStatus::Scored, 1)
            } else if skipped_ids.contains(sat.id.as_str()) {
                (FrameStatus::Unreadable, 0)
            } else {
                (FrameStatus::Unpaired, 0)
            };
            let slot = frames.entry(tile).or_insert((status, 0));
            if status == FrameStatus::Scored {
                slot.0 = FrameStatus::Scored;
            }
            slot.1 += count;
        }
        writes.extend(frames.into_iter().map(|(frame_id, (status, pair_count))| {
            Write::InsertFrame(FrameRecord { task_id: task.into(), period: period.clone(), frame_id, status, pair_count })
        }));
        writes.extend(cells.iter().map(|c| {
            Write::InsertFine(FineGrainedRow {
                task_id: task.into(),
                period: period.clone(),
                cell: c.cell,
                lat: c.center.lat,
                lon: c.center.lon,
                score: c.score,
                pair_count: c.pair_count,
            })
        }));
        writes.extend(agg.scores.iter().map(|c| {
            Write::UpsertCounty(crate::store::CountyRow {
                county_id: c.county_id.clone(),
                period: c.period.clone(),
                value: c.value,
                cell_count: c.cell_count,
                task_id: task.into(),
            })
        }));
        stats.satellites += slice.satellites.len();
        stats.pairs += aligned.pairs.len();
        stats.scored += scored.scored.len();
        stats.skipped += scored.skipped.len();
        stats.cells += cells.len();
        stats.county_scores += agg.scores.len();
    }
    Ok(Results { writes, stats })
}

/// Latest progress per stage, from a task's events.
pub fn stage_progress(events: &[TaskEvent]) -> BTreeMap<Stage, f64> {
    let mut out = BTreeMap::new();
    for e in events {
        let p = out.entry(e.stage).or_insert(0.0f64);
        *p = p.max(e.progress);
    }
    out
}
