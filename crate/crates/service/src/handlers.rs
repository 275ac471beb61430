use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::Json;
use geoecon::geo::{BBox, CountyPolygon};
use geoecon::pipeline::{is_period_label, run_task, stage_progress, Aggregation, PeriodRange, Region, Stage, TaskSpec};
use geoecon::store::{new_task, TaskRecord, TaskStatus, Write};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::{ApiError, AppState, IDEMPOTENCY_HEADER};

type Shared = State<Arc<AppState>>;
type Reply = Result<Json<Value>, ApiError>;

/// Longest a single events request may wait.
const MAX_WAIT: Duration = Duration::from_secs(30);
const POLL_STEP: Duration = Duration::from_millis(25);

pub async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

pub async fn not_found() -> ApiError {
    ApiError::not_found("NOT_FOUND", "no such endpoint")
}

pub async fn method_not_allowed() -> ApiError {
    ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "METHOD_NOT_ALLOWED", "method not allowed on this endpoint")
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateTask {
    task_id: Option<String>,
    region: Region,
    period: PeriodRange,
    model: Option<String>,
    worker_count: Option<usize>,
    seed: Option<u64>,
    aggregation: Option<Aggregation>,
}

pub async fn create_task(State(state): Shared, headers: HeaderMap, body: Bytes) -> Result<(StatusCode, Json<Value>), ApiError> {
    let req: CreateTask =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request("INVALID_REQUEST", e.to_string()))?;
    let key = match headers.get(IDEMPOTENCY_HEADER) {
        Some(v) => Some(
            v.to_str()
                .ok()
                .filter(|k| !k.is_empty() && k.len() <= 256)
                .ok_or_else(|| ApiError::bad_request("INVALID_REQUEST", "idempotency key must be 1-256 visible characters"))?
                .to_string(),
        ),
        None => None,
    };
    // held for the whole submission so concurrent retries cannot both start
    let mut submitted = state.submitted.lock().unwrap_or_else(|e| e.into_inner());
    if let Some(task_id) = key.as_ref().and_then(|k| submitted.get(k)) {
        let status = state.store.task(task_id).map(|t| t.status).unwrap_or(TaskStatus::Pending);
        return Ok((StatusCode::CREATED, Json(json!({ "task_id": task_id, "status": status }))));
    }
    let spec = TaskSpec {
        task_id: req.task_id.unwrap_or_else(|| format!("task-{}", uuid::Uuid::new_v4().simple())),
        region: req.region,
        period: req.period,
        model: req.model.unwrap_or_else(|| "default".into()),
        worker_count: req.worker_count.unwrap_or(state.default_workers),
        seed: req.seed.unwrap_or(0),
        aggregation: req.aggregation.unwrap_or_default(),
    };
    state.env.check(&spec)?;

    let task_id = spec.task_id.clone();
    {
        let mut in_flight = state.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        if in_flight.contains(&task_id) {
            return Err(ApiError::new(StatusCode::CONFLICT, "TASK_RUNNING", format!("task {task_id} is already running")));
        }
        let snapshot = serde_json::to_value(&spec).map_err(|e| ApiError::internal(e.to_string()))?;
        let status = match state.store.task(&task_id) {
            None => {
                state.store.commit(vec![Write::CreateTask(new_task(&task_id, snapshot))])?;
                TaskStatus::Pending
            }
            Some(t) => {
                let running = TaskRecord { spec: snapshot, ..t.with_status(TaskStatus::Running, None) };
                state.store.commit(vec![
                    Write::ClearTask { task_id: task_id.clone(), results: false, events: true },
                    Write::UpdateTask(running),
                ])?;
                TaskStatus::Running
            }
        };
        in_flight.insert(task_id.clone());
        if let Some(k) = key {
            submitted.insert(k, task_id.clone());
        }
        drop(submitted);

        let runner = state.clone();
        tokio::task::spawn_blocking(move || {
            match run_task(&spec, &runner.env, &runner.store) {
                Ok(report) => log::info!("task {} finished {:?}", spec.task_id, report.record.status),
                Err(e) => log::error!("task {} could not run: {e}", spec.task_id),
            }
            runner.in_flight.lock().unwrap_or_else(|e| e.into_inner()).remove(&spec.task_id);
        });
        Ok((StatusCode::CREATED, Json(json!({ "task_id": task_id, "status": status }))))
    }
}

fn task_json(t: &TaskRecord) -> Value {
    serde_json::to_value(t).expect("task record serializes")
}

pub async fn list_tasks(State(state): Shared) -> Json<Value> {
    Json(json!({ "tasks": state.store.tasks().iter().map(task_json).collect::<Vec<_>>() }))
}

fn find_task(state: &AppState, id: &str) -> Result<TaskRecord, ApiError> {
    state.store.task(id).ok_or_else(|| ApiError::not_found("UNKNOWN_TASK", format!("no task {id:?}")))
}

pub async fn get_task(State(state): Shared, Path(id): Path<String>) -> Reply {
    let task = find_task(&state, &id)?;
    let progress = stage_progress(&state.store.events(&id, 0));
    let mut body = task_json(&task);
    let stages = [Stage::Read, Stage::Score, Stage::Reduce, Stage::Aggregate];
    body["progress"] = stages
        .iter()
        .map(|s| (serde_json::to_value(s).unwrap().as_str().unwrap().to_string(), json!(progress.get(s).copied().unwrap_or(0.0))))
        .collect::<serde_json::Map<_, _>>()
        .into();
    Ok(Json(body))
}

fn parse_u64(params: &HashMap<String, String>, name: &str) -> Result<Option<u64>, ApiError> {
    params
        .get(name)
        .map(|v| v.parse::<u64>().map_err(|_| ApiError::bad_request("INVALID_QUERY", format!("{name} must be a non-negative integer"))))
        .transpose()
}

pub async fn task_events(State(state): Shared, Path(id): Path<String>, Query(params): Query<HashMap<String, String>>) -> Reply {
    find_task(&state, &id)?;
    let after = parse_u64(&params, "after")?.unwrap_or(0);
    let wait = Duration::from_millis(parse_u64(&params, "wait_ms")?.unwrap_or(0)).min(MAX_WAIT);
    let deadline = Instant::now() + wait;
    loop {
        let events = state.store.events(&id, after);
        let settled = || {
            let running = state.in_flight.lock().unwrap_or_else(|e| e.into_inner()).contains(&id);
            !running && state.store.task(&id).is_some_and(|t| t.status.is_terminal())
        };
        if !events.is_empty() || Instant::now() >= deadline || settled() {
            let cursor = events.last().map_or(after, |e| e.seq);
            return Ok(Json(json!({ "task_id": id, "events": events, "cursor": cursor })));
        }
        tokio::time::sleep(POLL_STEP).await;
    }
}

/// Parses `west,south,east,north` in degrees.
fn parse_bbox(raw: &str) -> Result<BBox, ApiError> {
    let bad = |m: String| ApiError::bad_request("INVALID_BBOX", m);
    let parts: Vec<f64> = raw
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad(format!("bbox {raw:?} is not four comma-separated numbers")))?;
    let [west, south, east, north] = parts[..] else {
        return Err(bad(format!("bbox {raw:?} must have exactly four values west,south,east,north")));
    };
    BBox::from_bounds(south, west, north, east).map_err(|e| bad(e.to_string()))
}

fn required<'a>(params: &'a HashMap<String, String>, name: &str) -> Result<&'a str, ApiError> {
    params
        .get(name)
        .map(String::as_str)
        .filter(|v| !v.is_empty())
        .ok_or_else(|| ApiError::bad_request("INVALID_QUERY", format!("query parameter {name} is required")))
}

fn period_param<'a>(params: &'a HashMap<String, String>, name: &str) -> Result<Option<&'a str>, ApiError> {
    match params.get(name).map(String::as_str) {
        None => Ok(None),
        Some(p) if is_period_label(p) => Ok(Some(p)),
        Some(p) => Err(ApiError::bad_request("INVALID_PERIOD", format!("{name}={p:?} is not YYYY or YYYY-MM"))),
    }
}

pub async fn heatmap(State(state): Shared, Query(params): Query<HashMap<String, String>>) -> Reply {
    let bbox = parse_bbox(required(&params, "bbox")?)?;
    required(&params, "period")?;
    let period = period_param(&params, "period")?.expect("checked above");
    let cells: Vec<Value> = state
        .store
        .query_heatmap(&bbox, period)
        .into_iter()
        .map(|r| {
            json!({
                "lat": r.lat,
                "lon": r.lon,
                "score": r.score,
                "cell": r.cell,
                "pair_count": r.pair_count,
                "task_id": r.task_id,
            })
        })
        .collect();
    Ok(Json(json!({
        "period": period,
        "bbox": [bbox.min.lon, bbox.min.lat, bbox.max.lon, bbox.max.lat],
        "cells": cells,
    })))
}

fn counties(state: &AppState) -> Result<Vec<CountyPolygon>, ApiError> {
    Ok(state.env.counties()?)
}

fn find_county(state: &AppState, id: &str) -> Result<CountyPolygon, ApiError> {
    counties(state)?
        .into_iter()
        .find(|c| c.county_id == id)
        .ok_or_else(|| ApiError::not_found("UNKNOWN_COUNTY", format!("no county {id:?}")))
}

pub async fn list_counties(State(state): Shared) -> Reply {
    Ok(Json(json!({ "counties": counties(&state)? })))
}

pub async fn county_score(State(state): Shared, Path(id): Path<String>, Query(params): Query<HashMap<String, String>>) -> Reply {
    required(&params, "period")?;
    let period = period_param(&params, "period")?.expect("checked above");
    find_county(&state, &id)?;
    let row = state
        .store
        .county(&id, period)
        .ok_or_else(|| ApiError::not_found("NO_DATA", format!("no value for county {id} in {period}")))?;
    Ok(Json(serde_json::to_value(row).expect("county row serializes")))
}

pub async fn county_trend(State(state): Shared, Path(id): Path<String>, Query(params): Query<HashMap<String, String>>) -> Reply {
    let from = period_param(&params, "from")?.unwrap_or("0000");
    let to = period_param(&params, "to")?.unwrap_or("9999-12");
    if from > to {
        return Err(ApiError::bad_request("INVALID_PERIOD", format!("from {from} is after to {to}")));
    }
    find_county(&state, &id)?;
    let points: Vec<Value> = state
        .store
        .query_trend(&id, from, to)
        .into_iter()
        .map(|r| json!({ "period": r.period, "value": r.value, "cell_count": r.cell_count, "task_id": r.task_id }))
        .collect();
    Ok(Json(json!({ "county_id": id, "points": points })))
}
