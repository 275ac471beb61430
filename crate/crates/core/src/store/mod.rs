//! Durable tables for tasks, frame progress, fine-grained cell scores,
//! county results and task events.
//!
//! A store directory holds:
//!
//! ```text
//! manifest.json         {"schema_version": 1, "tables": [...], "commit_log": "commits.jsonl"}
//! tasks.jsonl           one journal per table, in TABLES order
//! frames.jsonl
//! fine_grained.jsonl
//! county_results.jsonl
//! events.jsonl
//! commits.jsonl         ids of committed transactions
//! ```
//!
//! Every journal line is `<crc32 hex> <json>`. A transaction appends its
//! entries to the touched table journals in [`TABLES`] order, syncs them, and
//! only then appends its id to the commit log. Replay skips entries whose
//! transaction is not in the commit log, so a crash at any byte leaves either
//! the whole transaction or none of it. A torn final line is truncated on
//! open; damage anywhere else is reported as corruption.
//!
//! Compaction rewrites each journal as a `{"base": N}` header followed by the
//! live rows; entries at or below a journal's base are committed by
//! construction.

mod journal;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{BBox, GeoPoint, TileId};
use journal::{frame, Journal, ScanError};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const COMMIT_LOG: &str = "commits.jsonl";
/// Journal file names in transaction write order.
pub const TABLES: [&str; 5] = ["tasks.jsonl", "frames.jsonl", "fine_grained.jsonl", "county_results.jsonl", "events.jsonl"];

const TASKS: usize = 0;
const FRAMES: usize = 1;
const FINE: usize = 2;
const COUNTIES: usize = 3;
const EVENTS: usize = 4;

/// Journals are compacted on open when they hold this many more lines than
/// twice the live rows.
const COMPACT_SLACK: usize = 1024;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("{path}: damaged record at line {line}; last consistent transaction is {last_consistent_txn}")]
    Corrupt { path: PathBuf, line: usize, last_consistent_txn: u64 },
    #[error("constraint violation: {0}")]
    Constraint(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Pending,
    Running,
    Succeeded,
    Failed,
}

impl TaskStatus {
    /// Lifecycle edges: pending → running → {succeeded, failed}; a finished
    /// task may be run again.
    pub fn can_become(self, next: TaskStatus) -> bool {
        use TaskStatus::*;
        matches!(
            (self, next),
            (Pending, Running) | (Running, Running) | (Running, Succeeded) | (Running, Failed) | (Succeeded, Running) | (Failed, Running)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, TaskStatus::Succeeded | TaskStatus::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    /// Snapshot of the submitted task specification.
    pub spec: serde_json::Value,
    pub status: TaskStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub created_at: String,
    pub updated_at: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameStatus {
    /// At least one pair of the tile was scored.
    Scored,
    /// No street view close enough, or an empty label window.
    Unpaired,
    /// The tile's pair was dropped because an image could not be read.
    Unreadable,
}

/// Processing outcome of one satellite tile within a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub task_id: String,
    pub period: String,
    pub frame_id: TileId,
    pub status: FrameStatus,
    pub pair_count: usize,
}

/// Maximum pair score of one zoom-12 cell within a task and period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineGrainedRow {
    pub task_id: String,
    pub period: String,
    pub cell: TileId,
    pub lat: f64,
    pub lon: f64,
    pub score: f64,
    pub pair_count: usize,
}

/// County-level value for one period; `task_id` records which task wrote it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountyRow {
    pub county_id: String,
    pub period: String,
    pub value: f64,
    pub cell_count: usize,
    pub task_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Read,
    Score,
    Reduce,
    Aggregate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Info,
    Warn,
    Error,
}

/// A persisted progress or log event. `seq` is unique and increasing across
/// the whole store and is never reused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEvent {
    pub seq: u64,
    pub task_id: String,
    pub timestamp: String,
    pub stage: Stage,
    pub level: Level,
    pub message: String,
    pub progress: f64,
}

/// One write of a transaction.
#[derive(Debug, Clone, PartialEq)]
pub enum Write {
    CreateTask(TaskRecord),
    UpdateTask(TaskRecord),
    /// With `results`, removes the task's frames, fine-grained rows and the
    /// county rows it wrote; with `events`, its events.
    ClearTask { task_id: String, results: bool, events: bool },
    InsertFrame(FrameRecord),
    InsertFine(FineGrainedRow),
    UpsertCounty(CountyRow),
}

/// Every table's rows in key order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StoreDump {
    pub tasks: Vec<TaskRecord>,
    pub frames: Vec<FrameRecord>,
    pub fine_grained: Vec<FineGrainedRow>,
    pub county_results: Vec<CountyRow>,
    pub events: Vec<TaskEvent>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    tables: Vec<String>,
    commit_log: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(bound(deserialize = "R: DeserializeOwned"))]
struct Line<R> {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base: Option<u64>,
    /// Highest event sequence number ever issued, kept across compaction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seq: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    txn: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    put: Option<R>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    clear: Option<String>,
}

impl<R> Line<R> {
    fn put(txn: u64, row: R) -> Self {
        Line { base: None, seq: None, txn: Some(txn), put: Some(row), clear: None }
    }

    fn clear(txn: u64, task_id: &str) -> Self {
        Line { base: None, seq: None, txn: Some(txn), put: None, clear: Some(task_id.to_string()) }
    }

    fn header(base: u64, seq: Option<u64>) -> Self {
        Line { base: Some(base), seq, txn: None, put: None, clear: None }
    }
}

fn encode<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("store rows serialize")
}

type CellKey = (String, String, TileId);

#[derive(Debug, Default)]
struct Tables {
    tasks: BTreeMap<String, TaskRecord>,
    frames: BTreeMap<CellKey, FrameRecord>,
    /// Rows with the transaction that wrote them; later commits win overlaps.
    fine: BTreeMap<CellKey, (u64, FineGrainedRow)>,
    counties: BTreeMap<(String, String), CountyRow>,
    events: BTreeMap<u64, TaskEvent>,
    max_seq: u64,
}

impl Tables {
    fn live_rows(&self) -> usize {
        self.tasks.len() + self.frames.len() + self.fine.len() + self.counties.len() + self.events.len()
    }

    fn clear_task(&mut self, table: usize, task_id: &str) {
        match table {
            FRAMES => self.frames.retain(|k, _| k.0 != task_id),
            FINE => self.fine.retain(|k, _| k.0 != task_id),
            COUNTIES => self.counties.retain(|_, r| r.task_id != task_id),
            EVENTS => self.events.retain(|_, e| e.task_id != task_id),
            _ => {}
        }
    }
}

struct Inner {
    dir: PathBuf,
    journals: Vec<Journal>,
    commits: Journal,
    tables: Tables,
    next_txn: u64,
    sync: bool,
}

/// Journaled table store. Reads share a lock; each transaction holds the
/// write lock while it appends, so commits are serialized.
pub struct Store {
    inner: RwLock<Inner>,
}

#[derive(Debug, Clone, Copy)]
pub struct StoreOptions {
    /// fsync journals on every commit.
    pub sync: bool,
}

impl Default for StoreOptions {
    fn default() -> Self {
        StoreOptions { sync: true }
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn check_finite(what: &str, values: &[f64]) -> Result<(), StoreError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(StoreError::Constraint(format!("{what} holds a non-finite value")))
    }
}


enum Op<R> {
    Put(R),
    Clear(String),
}

struct Replay {
    committed: BTreeSet<u64>,
    commit_base: u64,
    max_txn: u64,
    entries: usize,
}

impl Replay {
    fn is_committed(&self, txn: u64, journal_base: u64) -> bool {
        txn <= journal_base || txn <= self.commit_base || self.committed.contains(&txn)
    }
}

fn parse<T: DeserializeOwned>(path: &Path, payload: &str) -> Result<T, StoreError> {
    serde_json::from_str(payload)
        .map_err(|e| StoreError::Schema { path: path.to_path_buf(), message: format!("unreadable record: {e}") })
}

/// Committed operations of one journal in file order, plus the highest event
/// sequence number its header carries.
fn committed_ops<R: DeserializeOwned>(
    path: &Path,
    payloads: &[String],
    replay: &mut Replay,
) -> Result<(Vec<(u64, Op<R>)>, u64), StoreError> {
    let mut base = 0;
    let mut seq = 0;
    let mut ops = Vec::new();
    for payload in payloads {
        let line: Line<R> = parse(path, payload)?;
        if let Some(b) = line.base {
            base = b;
            replay.max_txn = replay.max_txn.max(b);
        }
        seq = seq.max(line.seq.unwrap_or(0));
        let Some(txn) = line.txn else { continue };
        replay.entries += 1;
        replay.max_txn = replay.max_txn.max(txn);
        if !replay.is_committed(txn, base) {
            continue;
        }
        match (line.put, line.clear) {
            (Some(row), None) => ops.push((txn, Op::Put(row))),
            (None, Some(task)) => ops.push((txn, Op::Clear(task))),
            _ => {
                return Err(StoreError::Schema {
                    path: path.to_path_buf(),
                    message: format!("entry of transaction {txn} must hold exactly one of put and clear"),
                })
            }
        }
    }
    Ok((ops, seq))
}

fn check_manifest(dir: &Path) -> Result<(), StoreError> {
    let path = dir.join(MANIFEST_FILE);
    let schema = |message: String| StoreError::Schema { path: path.clone(), message };
    match std::fs::read(&path) {
        Ok(bytes) => {
            let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| schema(format!("unreadable manifest: {e}")))?;
            if m.schema_version != SCHEMA_VERSION {
                return Err(schema(format!(
                    "schema version {} is not supported (expected {SCHEMA_VERSION})",
                    m.schema_version
                )));
            }
            if m.tables != TABLES || m.commit_log != COMMIT_LOG {
                return Err(schema("manifest lists unexpected journals".into()));
            }
            Ok(())
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            if TABLES.iter().chain([&COMMIT_LOG]).any(|f| dir.join(f).exists()) {
                return Err(schema("journals present without a manifest".into()));
            }
            let m = Manifest {
                schema_version: SCHEMA_VERSION,
                tables: TABLES.iter().map(|s| s.to_string()).collect(),
                commit_log: COMMIT_LOG.to_string(),
            };
            let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
            let text = serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n";
            std::fs::write(&tmp, text).map_err(io_err(&tmp))?;
            std::fs::rename(&tmp, &path).map_err(io_err(&path))
        }
        Err(e) => Err(io_err(&path)(e)),
    }
}

fn put_line<R: Serialize>(txn: u64, row: &R) -> String {
    frame(&encode(&Line::put(txn, row)))
}

fn commit_line(txn: u64) -> String {
    frame(&encode(&Line::<()> { base: None, seq: None, txn: Some(txn), put: None, clear: None }))
}

impl Store {
    pub fn open(dir: &Path) -> Result<Store, StoreError> {
        Store::open_with(dir, StoreOptions::default())
    }

    pub fn open_with(dir: &Path, options: StoreOptions) -> Result<Store, StoreError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        check_manifest(dir)?;

        let commits_path = dir.join(COMMIT_LOG);
        let (commits, scan) = Journal::open(&commits_path).map_err(io_err(&commits_path))?;
        let scan = scan.map_err(|ScanError::Corrupt { line }| StoreError::Corrupt {
            path: commits_path.clone(),
            line,
            last_consistent_txn: 0,
        })?;
        let mut replay = Replay { committed: BTreeSet::new(), commit_base: 0, max_txn: 0, entries: 0 };
        for payload in &scan.payloads {
            let line: Line<serde_json::Value> = parse(&commits_path, payload)?;
            if let Some(b) = line.base {
                replay.commit_base = replay.commit_base.max(b);
                replay.max_txn = replay.max_txn.max(b);
            }
            if let Some(t) = line.txn {
                replay.committed.insert(t);
                replay.max_txn = replay.max_txn.max(t);
            }
        }
        let last_consistent = replay.committed.last().copied().unwrap_or(0).max(replay.commit_base);

        let mut tables = Tables::default();
        let mut journals = Vec::with_capacity(TABLES.len());
        for (t, name) in TABLES.iter().enumerate() {
            let path = dir.join(name);
            let (journal, scan) = Journal::open(&path).map_err(io_err(&path))?;
            let payloads = scan
                .map_err(|ScanError::Corrupt { line }| StoreError::Corrupt {
                    path: path.clone(),
                    line,
                    last_consistent_txn: last_consistent,
                })?
                .payloads;
            match t {
                TASKS => {
                    for (_, op) in committed_ops::<TaskRecord>(&path, &payloads, &mut replay)?.0 {
                        if let Op::Put(r) = op {
                            tables.tasks.insert(r.task_id.clone(), r);
                        }
                    }
                }
                FRAMES => {
                    for (_, op) in committed_ops::<FrameRecord>(&path, &payloads, &mut replay)?.0 {
                        match op {
                            Op::Put(r) => {
                                tables.frames.insert((r.task_id.clone(), r.period.clone(), r.frame_id), r);
                            }
                            Op::Clear(task) => tables.clear_task(FRAMES, &task),
                        }
                    }
                }
                FINE => {
                    for (txn, op) in committed_ops::<FineGrainedRow>(&path, &payloads, &mut replay)?.0 {
                        match op {
                            Op::Put(r) => {
                                tables.fine.insert((r.task_id.clone(), r.period.clone(), r.cell), (txn, r));
                            }
                            Op::Clear(task) => tables.clear_task(FINE, &task),
                        }
                    }
                }
                COUNTIES => {
                    for (_, op) in committed_ops::<CountyRow>(&path, &payloads, &mut replay)?.0 {
                        match op {
                            Op::Put(r) => {
                                tables.counties.insert((r.county_id.clone(), r.period.clone()), r);
                            }
                            Op::Clear(task) => tables.clear_task(COUNTIES, &task),
                        }
                    }
                }
                _ => {
                    let (ops, seq) = committed_ops::<TaskEvent>(&path, &payloads, &mut replay)?;
                    tables.max_seq = tables.max_seq.max(seq);
                    for (_, op) in ops {
                        match op {
                            Op::Put(e) => {
                                tables.max_seq = tables.max_seq.max(e.seq);
                                tables.events.insert(e.seq, e);
                            }
                            Op::Clear(task) => tables.clear_task(EVENTS, &task),
                        }
                    }
                }
            }
            journals.push(journal);
        }
        if replay.entries > 0 {
            log::debug!("store {}: replayed {} entries into {} rows", dir.display(), replay.entries, tables.live_rows());
        }
        let needs_compaction = replay.entries > 2 * tables.live_rows() + COMPACT_SLACK;
        let inner =
            Inner { dir: dir.to_path_buf(), journals, commits, tables, next_txn: replay.max_txn + 1, sync: options.sync };
        let store = Store { inner: RwLock::new(inner) };
        if needs_compaction {
            store.compact()?;
        }
        Ok(store)
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Inner> {
        self.inner.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, Inner> {
        self.inner.write().unwrap_or_else(|e| e.into_inner())
    }

    pub fn dir(&self) -> PathBuf {
        self.read().dir.clone()
    }

    /// Applies `writes` as one atomic transaction and returns its id. Every
    /// constraint is checked before anything is written.
    pub fn commit(&self, writes: Vec<Write>) -> Result<u64, StoreError> {
        self.write().commit(writes)
    }

    /// Appends one event in its own transaction; the store assigns the
    /// sequence number and timestamp.
    pub fn append_event(
        &self,
        task_id: &str,
        stage: Stage,
        level: Level,
        message: impl Into<String>,
        progress: f64,
    ) -> Result<TaskEvent, StoreError> {
        let mut inner = self.write();
        if !inner.tables.tasks.contains_key(task_id) {
            return Err(StoreError::Constraint(format!("event for unknown task {task_id:?}")));
        }
        if !(0.0..=1.0).contains(&progress) {
            return Err(StoreError::Constraint(format!("progress {progress} outside [0, 1]")));
        }
        let event = TaskEvent {
            seq: inner.tables.max_seq + 1,
            task_id: task_id.to_string(),
            timestamp: now(),
            stage,
            level,
            message: message.into(),
            progress,
        };
        let txn = inner.next_txn;
        let mut lines: [String; 5] = Default::default();
        lines[EVENTS] = put_line(txn, &event);
        inner.append(txn, &lines)?;
        inner.next_txn += 1;
        inner.tables.max_seq = event.seq;
        inner.tables.events.insert(event.seq, event.clone());
        Ok(event)
    }

    pub fn task(&self, task_id: &str) -> Option<TaskRecord> {
        self.read().tables.tasks.get(task_id).cloned()
    }

    pub fn tasks(&self) -> Vec<TaskRecord> {
        self.read().tables.tasks.values().cloned().collect()
    }

    pub fn frames(&self, task_id: &str) -> Vec<FrameRecord> {
        self.read().tables.frames.iter().filter(|(k, _)| k.0 == task_id).map(|(_, r)| r.clone()).collect()
    }

    pub fn fine_rows(&self, task_id: &str) -> Vec<FineGrainedRow> {
        self.read().tables.fine.iter().filter(|(k, _)| k.0 == task_id).map(|(_, (_, r))| r.clone()).collect()
    }

    pub fn county(&self, county_id: &str, period: &str) -> Option<CountyRow> {
        self.read().tables.counties.get(&(county_id.to_string(), period.to_string())).cloned()
    }

    /// Every county row, ordered by county id then period.
    pub fn county_rows(&self) -> Vec<CountyRow> {
        self.read().tables.counties.values().cloned().collect()
    }

    /// Events of `task_id` with sequence number greater than `after`.
    pub fn events(&self, task_id: &str, after: u64) -> Vec<TaskEvent> {
        let inner = self.read();
        inner.tables.events.range(after.saturating_add(1)..).filter(|(_, e)| e.task_id == task_id).map(|(_, e)| e.clone()).collect()
    }

    /// Cells of `period` whose centres lie in `bbox`, ordered by cell. When
    /// several tasks scored a cell, the most recently committed row wins.
    pub fn query_heatmap(&self, bbox: &BBox, period: &str) -> Vec<FineGrainedRow> {
        let inner = self.read();
        let mut best: BTreeMap<TileId, (u64, &FineGrainedRow)> = BTreeMap::new();
        for ((_, p, cell), (txn, row)) in &inner.tables.fine {
            if p != period || !bbox.contains(&GeoPoint { lat: row.lat, lon: row.lon }) {
                continue;
            }
            let slot = best.entry(*cell).or_insert((*txn, row));
            if *txn > slot.0 {
                *slot = (*txn, row);
            }
        }
        best.into_values().map(|(_, r)| r.clone()).collect()
    }

    /// Rows of one county with `from ≤ period ≤ to`, ascending by period.
    pub fn query_trend(&self, county_id: &str, from: &str, to: &str) -> Vec<CountyRow> {
        if from > to {
            return Vec::new();
        }
        let inner = self.read();
        let lo = (county_id.to_string(), from.to_string());
        let hi = (county_id.to_string(), to.to_string());
        inner.tables.counties.range(lo..=hi).map(|(_, r)| r.clone()).collect()
    }

    pub fn dump(&self) -> StoreDump {
        let inner = self.read();
        let t = &inner.tables;
        StoreDump {
            tasks: t.tasks.values().cloned().collect(),
            frames: t.frames.values().cloned().collect(),
            fine_grained: t.fine.values().map(|(_, r)| r.clone()).collect(),
            county_results: t.counties.values().cloned().collect(),
            events: t.events.values().cloned().collect(),
        }
    }

    /// Rewrites every journal to its live rows. Tables are swapped in one at
    /// a time before the commit log, so a crash mid-way loses nothing.
    pub fn compact(&self) -> Result<(), StoreError> {
        let mut inner = self.write();
        let base = inner.next_txn - 1;
        let header = |seq: Option<u64>| frame(&encode(&Line::<()>::header(base, seq)));
        let t = &inner.tables;
        let contents = [
            header(None) + &t.tasks.values().map(|r| put_line(base, r)).collect::<String>(),
            header(None) + &t.frames.values().map(|r| put_line(base, r)).collect::<String>(),
            header(None) + &t.fine.values().map(|(txn, r)| put_line(*txn, r)).collect::<String>(),
            header(None) + &t.counties.values().map(|r| put_line(base, r)).collect::<String>(),
            header(Some(t.max_seq)) + &t.events.values().map(|e| put_line(base, e)).collect::<String>(),
        ];
        let sync = inner.sync;
        for (journal, content) in inner.journals.iter_mut().zip(contents) {
            journal.replace(&content, sync).map_err(io_err(journal.path()))?;
        }
        let commits = header(None);
        let path = inner.commits.path().to_path_buf();
        inner.commits.replace(&commits, sync).map_err(io_err(&path))
    }
}

impl Inner {
    fn task_status(&self, overlay: &BTreeMap<&str, TaskStatus>, task_id: &str) -> Option<TaskStatus> {
        overlay.get(task_id).copied().or_else(|| self.tables.tasks.get(task_id).map(|t| t.status))
    }

    fn validate(&self, writes: &[Write]) -> Result<(), StoreError> {
        let constraint = |m: String| Err(StoreError::Constraint(m));
        let mut overlay: BTreeMap<&str, TaskStatus> = BTreeMap::new();
        let mut cleared: BTreeSet<&str> = BTreeSet::new();
        let mut frames: BTreeSet<CellKey> = BTreeSet::new();
        let mut fine: BTreeSet<CellKey> = BTreeSet::new();
        for w in writes {
            let task_id = match w {
                Write::CreateTask(r) | Write::UpdateTask(r) => r.task_id.as_str(),
                Write::ClearTask { task_id, .. } => task_id.as_str(),
                Write::InsertFrame(r) => r.task_id.as_str(),
                Write::InsertFine(r) => r.task_id.as_str(),
                Write::UpsertCounty(r) => r.task_id.as_str(),
            };
            let status = self.task_status(&overlay, task_id);
            if status.is_none() && !matches!(w, Write::CreateTask(_)) {
                return constraint(format!("unknown task {task_id:?}"));
            }
            match w {
                Write::CreateTask(r) => {
                    if r.task_id.is_empty() {
                        return constraint("empty task id".into());
                    }
                    if status.is_some() {
                        return constraint(format!("task {task_id:?} already exists"));
                    }
                    if r.status != TaskStatus::Pending {
                        return constraint(format!("task {task_id:?} must be created pending"));
                    }
                    overlay.insert(task_id, r.status);
                }
                Write::UpdateTask(r) => {
                    let cur = status.expect("checked above");
                    if !cur.can_become(r.status) {
                        return constraint(format!("task {task_id:?} cannot go from {cur:?} to {:?}", r.status));
                    }
                    overlay.insert(task_id, r.status);
                }
                Write::ClearTask { results, .. } => {
                    if *results {
                        cleared.insert(task_id);
                    }
                }
                Write::InsertFrame(r) => {
                    let key = (r.task_id.clone(), r.period.clone(), r.frame_id);
                    let stored = !cleared.contains(task_id) && self.tables.frames.contains_key(&key);
                    if stored || !frames.insert(key) {
                        return constraint(format!("duplicate frame {} for task {task_id:?}", r.frame_id));
                    }
                }
                Write::InsertFine(r) => {
                    check_finite("fine-grained row", &[r.lat, r.lon, r.score])?;
                    let key = (r.task_id.clone(), r.period.clone(), r.cell);
                    let stored = !cleared.contains(task_id) && self.tables.fine.contains_key(&key);
                    if stored || !fine.insert(key) {
                        return constraint(format!("duplicate cell {} for task {task_id:?}", r.cell));
                    }
                }
                Write::UpsertCounty(r) => {
                    check_finite("county row", &[r.value])?;
                    if r.county_id.is_empty() || r.period.is_empty() {
                        return constraint("county row needs a county id and a period".into());
                    }
                }
            }
        }
        Ok(())
    }

    fn commit(&mut self, writes: Vec<Write>) -> Result<u64, StoreError> {
        self.validate(&writes)?;
        let txn = self.next_txn;
        let mut lines: [String; 5] = Default::default();
        for w in &writes {
            match w {
                Write::CreateTask(r) | Write::UpdateTask(r) => lines[TASKS] += &put_line(txn, r),
                Write::ClearTask { task_id, results, events } => {
                    let clear = frame(&encode(&Line::<()>::clear(txn, task_id)));
                    if *results {
                        for t in [FRAMES, FINE, COUNTIES] {
                            lines[t] += &clear;
                        }
                    }
                    if *events {
                        lines[EVENTS] += &clear;
                    }
                }
                Write::InsertFrame(r) => lines[FRAMES] += &put_line(txn, r),
                Write::InsertFine(r) => lines[FINE] += &put_line(txn, r),
                Write::UpsertCounty(r) => lines[COUNTIES] += &put_line(txn, r),
            }
        }
        self.append(txn, &lines)?;
        self.next_txn += 1;
        for w in writes {
            match w {
                Write::CreateTask(r) | Write::UpdateTask(r) => {
                    self.tables.tasks.insert(r.task_id.clone(), r);
                }
                Write::ClearTask { task_id, results, events } => {
                    if results {
                        for t in [FRAMES, FINE, COUNTIES] {
                            self.tables.clear_task(t, &task_id);
                        }
                    }
                    if events {
                        self.tables.clear_task(EVENTS, &task_id);
                    }
                }
                Write::InsertFrame(r) => {
                    self.tables.frames.insert((r.task_id.clone(), r.period.clone(), r.frame_id), r);
                }
                Write::InsertFine(r) => {
                    self.tables.fine.insert((r.task_id.clone(), r.period.clone(), r.cell), (txn, r));
                }
                Write::UpsertCounty(r) => {
                    self.tables.counties.insert((r.county_id.clone(), r.period.clone()), r);
                }
            }
        }
        Ok(txn)
    }

    /// Appends the table lines, then the commit record. On failure every
    /// journal is cut back to its previous length.
    fn append(&mut self, txn: u64, lines: &[String; 5]) -> Result<(), StoreError> {
        let before: Vec<u64> = self.journals.iter().map(Journal::len).collect();
        let commits_before = self.commits.len();
        let sync = self.sync;
        let mut result = Ok(());
        for (journal, text) in self.journals.iter_mut().zip(lines) {
            if !text.is_empty() {
                if let Err(e) = journal.append(text, sync) {
                    result = Err(io_err(journal.path())(e));
                    break;
                }
            }
        }
        if result.is_ok() {
            if let Err(e) = self.commits.append(&commit_line(txn), sync) {
                result = Err(io_err(self.commits.path())(e));
            }
        }
        if result.is_err() {
            for (journal, len) in self.journals.iter_mut().zip(before) {
                let _ = journal.rollback(len);
            }
            let _ = self.commits.rollback(commits_before);
        }
        result
    }
}

/// Fresh pending task record stamped with the current time.
pub fn new_task(task_id: impl Into<String>, spec: serde_json::Value) -> TaskRecord {
    let at = now();
    TaskRecord { task_id: task_id.into(), spec, status: TaskStatus::Pending, message: None, created_at: at.clone(), updated_at: at }
}

impl TaskRecord {
    /// Copy with a new status and message, stamped with the current time.
    pub fn with_status(&self, status: TaskStatus, message: Option<String>) -> TaskRecord {
        TaskRecord { status, message, updated_at: now(), ..self.clone() }
    }
}
