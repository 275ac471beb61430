use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::align::AlignedPair;
use crate::dataio::{decode_image, ImageRecord};
use crate::dataset::PeriodInputs;
use crate::geo::{point_in_polygon, BBox, CountyPolygon, GeoError, GeoPoint, TileId, KM_PER_DEGREE};
use crate::model::{Session, TrainedModel};

/// Records whose location lies inside `bbox`, in input order.
pub fn filter_region(records: &[ImageRecord], bbox: &BBox) -> Vec<ImageRecord> {
    records.iter().filter(|r| bbox.contains(&r.location)).cloned().collect()
}

/// `bbox` grown by at least `km` on every side, clamped to the globe.
pub fn expand_bbox(bbox: &BBox, km: f64) -> BBox {
    let dlat = km / KM_PER_DEGREE;
    let min_lat = (bbox.min.lat - dlat).max(-90.0);
    let max_lat = (bbox.max.lat + dlat).min(90.0);
    // the narrowest parallel in the grown box needs the widest longitude margin
    let cos = min_lat.abs().max(max_lat.abs()).to_radians().cos();
    let dlon = if cos < 1e-6 { 360.0 } else { 1.01 * km / (KM_PER_DEGREE * cos) };
    BBox {
        min: GeoPoint { lat: min_lat, lon: (bbox.min.lon - dlon).max(-180.0) },
        max: GeoPoint { lat: max_lat, lon: (bbox.max.lon + dlon).min(180.0) },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReadSlice {
    /// Satellite tiles inside the region.
    pub satellites: Vec<ImageRecord>,
    /// Street views inside the region grown by the pairing distance, so
    /// tiles near the edge see the same candidates as in the full corpus.
    pub streetviews: Vec<ImageRecord>,
}

pub fn stage_read(inputs: &PeriodInputs, region: &BBox, max_pair_km: f64) -> ReadSlice {
    ReadSlice {
        satellites: filter_region(&inputs.satellites, region),
        streetviews: filter_region(&inputs.streetviews, &expand_bbox(region, max_pair_km)),
    }
}

/// A pair with the files its images are read from.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreJob {
    pub pair: AlignedPair,
    pub sat_path: PathBuf,
    pub sv_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub pair: AlignedPair,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub sat_id: String,
    pub reason: String,
}

/// Scores and skips, each ordered by satellite id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreOutcome {
    pub scored: Vec<ScoredPair>,
    pub skipped: Vec<SkippedPair>,
}

enum JobResult {
    Scored(ScoredPair),
    Skipped(SkippedPair),
}

fn score_one(model: &TrainedModel, session: &mut Session<'_>, job: &ScoreJob) -> Result<JobResult, PipelineError> {
    let images = decode_image(&job.sat_path).and_then(|sat| Ok((sat, decode_image(&job.sv_path)?)));
    let (sat, sv) = match images {
        Ok(pair) => pair,
        Err(e) => return Ok(JobResult::Skipped(SkippedPair { sat_id: job.pair.sat_id.clone(), reason: e.to_string() })),
    };
    let (a, b) = model.prepare(&sat, &sv);
    let score = model.score_tensors(session, &a, &b)?;
    Ok(JobResult::Scored(ScoredPair { pair: job.pair.clone(), score }))
}

/// Scores every job on a pool of `worker_count` threads. Each worker owns
/// its inference session; `progress(done, total)` is called under a lock
/// after every chunk, so its arguments never decrease. The output does not
/// depend on `worker_count`.
pub fn stage_score(
    jobs: &[ScoreJob],
    model: &TrainedModel,
    worker_count: usize,
    progress: &(dyn Fn(usize, usize) + Sync),
) -> Result<ScoreOutcome, PipelineError> {
    if worker_count == 0 {
        return Err(PipelineError::InvalidSpec("worker count must be at least 1".into()));
    }
    if jobs.is_empty() {
        return Ok(ScoreOutcome::default());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count)
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))?;
    let chunk = jobs.len().div_ceil(4 * worker_count).clamp(1, 64);
    let done = Mutex::new(0usize);
    let chunks: Vec<Result<Vec<JobResult>, PipelineError>> = pool.install(|| {
        jobs.par_chunks(chunk)
            .map(|c| {
                let mut session = Session::eval(&model.model);
                let out = c.iter().map(|job| score_one(model, &mut session, job)).collect::<Result<Vec<_>, _>>()?;
                let mut d = done.lock().unwrap_or_else(|e| e.into_inner());
                *d += c.len();
                progress(*d, jobs.len());
                Ok(out)
            })
            .collect()
    });
    let mut outcome = ScoreOutcome::default();
    for c in chunks {
        for r in c? {
            match r {
                JobResult::Scored(s) => outcome.scored.push(s),
                JobResult::Skipped(s) => outcome.skipped.push(s),
            }
        }
    }
    outcome.scored.sort_by(|a, b| a.pair.sat_id.cmp(&b.pair.sat_id));
    outcome.skipped.sort_by(|a, b| a.sat_id.cmp(&b.sat_id));
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    pub cell: TileId,
    pub center: GeoPoint,
    /// Maximum over the cell's pair scores.
    pub score: f64,
    pub pair_count: usize,
}

/// Groups scored pairs by satellite tile and keeps each cell's maximum,
/// ordered by cell.
pub fn stage_reduce_max(scored: &[ScoredPair]) -> Vec<CellScore> {
    let mut cells: BTreeMap<TileId, CellScore> = BTreeMap::new();
    for s in scored {
        let cell = cells.entry(s.pair.cell).or_insert_with(|| CellScore {
            cell: s.pair.cell,
            center: s.pair.cell.center(),
            score: s.score,
            pair_count: 0,
        });
        if s.score > cell.score {
            cell.score = s.score;
        }
        cell.pair_count += 1;
    }
    cells.into_values().collect()
}

/// County-level reduction of the cell maxima falling inside a polygon.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountyScore {
    pub county_id: String,
    pub period: String,
    pub value: f64,
    pub cell_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateOutcome {
    /// Ordered by county id.
    pub scores: Vec<CountyScore>,
    /// Counties whose polygon holds no cell centre.
    pub omitted: Vec<String>,
}

/// Reduces the cells whose centres fall inside each county polygon (edges
/// included, so a centre on a shared border counts for both counties).
pub fn stage_aggregate(
    cells: &[CellScore],
    counties: &[CountyPolygon],
    period: &str,
    method: Aggregation,
) -> Result<AggregateOutcome, GeoError> {
    let mut sorted: Vec<&CountyPolygon> = counties.iter().collect();
    sorted.sort_by(|a, b| a.county_id.cmp(&b.county_id));
    let mut out = AggregateOutcome::default();
    for county in sorted {
        let Some(bbox) = county.bbox() else { continue };
        let mut values = Vec::new();
        for c in cells {
            if bbox.contains(&c.center) && point_in_polygon(&c.center, county)? {
                values.push(c.score);
            }
        }
        if values.is_empty() {
            out.omitted.push(county.county_id.clone());
            continue;
        }
        let value = match method {
            Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Aggregation::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Aggregation::Sum => values.iter().sum(),
        };
        out.scores.push(CountyScore {
            county_id: county.county_id.clone(),
            period: period.to_string(),
            value,
            cell_count: values.len(),
        });
    }
    Ok(out)
}
