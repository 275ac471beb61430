//! Satellite ↔ street-view pairing with nightlight labels.

mod index;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{read_jsonl, write_jsonl, DataError, ImageKind, ImageRecord};
use crate::geo::{latlon_to_tile, nightlight_window_mean, GeoError, NightlightRaster, TileId, SYSTEM_ZOOM};

pub use index::{SpatialGridIndex, CELL_DEG};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Pairs farther apart than this are discarded.
pub const MAX_PAIR_KM: f64 = 5.0;
/// Side of the square label window around the satellite tile centre.
pub const LABEL_WINDOW_KM: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedPair {
    pub sat_id: String,
    pub sv_id: String,
    pub distance_km: f64,
    pub label: f64,
    /// Zoom-12 tile of the satellite image.
    pub cell: TileId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairOptions {
    pub max_km: f64,
    pub window_km: f64,
    /// Only street views with this heading take part; `None` admits all.
    pub heading: Option<u16>,
}

impl Default for PairOptions {
    fn default() -> Self {
        PairOptions { max_km: MAX_PAIR_KM, window_km: LABEL_WINDOW_KM, heading: Some(0) }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PairOutcome {
    /// Sorted by `sat_id`.
    pub pairs: Vec<AlignedPair>,
    pub dropped_no_streetview: usize,
    pub dropped_too_far: usize,
    pub dropped_empty_window: usize,
}

pub fn build_index(streetviews: &[ImageRecord]) -> Result<SpatialGridIndex, AlignError> {
    SpatialGridIndex::build(streetviews)
}

/// Nearest indexed street view to the satellite record's location.
pub fn nearest_streetview<'a>(index: &'a SpatialGridIndex, sat: &ImageRecord) -> Option<(&'a str, f64)> {
    index.nearest(&sat.location)
}

/// One candidate per satellite: its nearest street view, kept when within
/// `max_km` and when the label window holds at least one valid cell.
pub fn build_pairs(
    sats: &[ImageRecord],
    svs: &[ImageRecord],
    raster: &NightlightRaster,
    opts: &PairOptions,
) -> Result<PairOutcome, AlignError> {
    if let Some(bad) = sats.iter().find(|r| r.kind != ImageKind::Satellite) {
        return Err(AlignError::Contract(format!("{} is not a satellite record", bad.id)));
    }
    let eligible: Vec<ImageRecord> =
        svs.iter().filter(|r| opts.heading.is_none() || r.heading == opts.heading).cloned().collect();
    let index = build_index(&eligible)?;
    let mut out = PairOutcome::default();
    for sat in sats {
        let Some((sv_id, distance_km)) = index.nearest(&sat.location) else {
            out.dropped_no_streetview += 1;
            continue;
        };
        if distance_km > opts.max_km {
            out.dropped_too_far += 1;
            continue;
        }
        let cell = latlon_to_tile(&sat.location, SYSTEM_ZOOM)?;
        let label = match nightlight_window_mean(raster, &cell.center(), opts.window_km) {
            Ok(v) => v,
            Err(GeoError::EmptyWindow { .. } | GeoError::OutOfBounds { .. }) => {
                out.dropped_empty_window += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        out.pairs.push(AlignedPair { sat_id: sat.id.clone(), sv_id: sv_id.to_string(), distance_km, label, cell });
    }
    if out.dropped_empty_window > 0 {
        log::warn!("{} satellite tiles dropped: empty label window", out.dropped_empty_window);
    }
    out.pairs.sort_by(|a, b| a.sat_id.cmp(&b.sat_id));
    Ok(out)
}

pub fn write_pairs(path: &Path, pairs: &[AlignedPair]) -> Result<(), AlignError> {
    Ok(write_jsonl(path, pairs)?)
}

pub fn read_pairs(path: &Path) -> Result<Vec<AlignedPair>, AlignError> {
    Ok(read_jsonl(path)?)
}
