use std::collections::HashMap;

use super::AlignError;
use crate::dataio::{ImageKind, ImageRecord};
use crate::geo::{haversine_km, GeoPoint, EARTH_RADIUS_KM};

/// Bucket size in degrees (about 5.5 km of latitude).
pub const CELL_DEG: f64 = 0.05;
const LAT_CELLS: i64 = (180.0 / CELL_DEG) as i64;
const LON_CELLS: i64 = (360.0 / CELL_DEG) as i64;
const SLACK_KM: f64 = 1e-6;

/// Exact nearest-neighbour index over street-view locations.
///
/// Buckets are keyed by `(floor((lat+90)/cell), floor((lon+180)/cell) mod
/// LON_CELLS)`, so the longitude axis wraps at the antimeridian. Queries scan
/// square rings of buckets outward and stop once a lower bound on the
/// distance to every unscanned bucket exceeds the best candidate. Sparse
/// data whose rings would cost more than a linear scan falls back to one.
#[derive(Debug, Clone, Default)]
pub struct SpatialGridIndex {
    ids: Vec<String>,
    points: Vec<GeoPoint>,
    buckets: HashMap<(i64, i64), Vec<usize>>,
    /// Largest |lat| of any indexed point.
    max_abs_lat: f64,
}

fn key(p: &GeoPoint) -> (i64, i64) {
    let i = (((p.lat + 90.0) / CELL_DEG).floor() as i64).clamp(0, LAT_CELLS - 1);
    let j = (((p.lon + 180.0) / CELL_DEG).floor() as i64).rem_euclid(LON_CELLS);
    (i, j)
}

impl SpatialGridIndex {
    pub fn build(records: &[ImageRecord]) -> Result<Self, AlignError> {
        let mut index = SpatialGridIndex::default();
        for r in records {
            if r.kind != ImageKind::Streetview {
                return Err(AlignError::Contract(format!("{} is not a street-view record", r.id)));
            }
            r.location.validate()?;
            let n = index.ids.len();
            index.ids.push(r.id.clone());
            index.points.push(r.location);
            index.buckets.entry(key(&r.location)).or_default().push(n);
            index.max_abs_lat = index.max_abs_lat.max(r.location.lat.abs());
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Bucket keys in use; every indexed record sits in exactly one.
    pub fn bucket_sizes(&self) -> impl Iterator<Item = ((i64, i64), usize)> + '_ {
        self.buckets.iter().map(|(k, v)| (*k, v.len()))
    }

    /// Nearest record by haversine distance; ties go to the smaller id.
    pub fn nearest(&self, q: &GeoPoint) -> Option<(&str, f64)> {
        if self.is_empty() {
            return None;
        }
        let (qi, qj) = key(q);
        let mut best: Option<(usize, f64)> = None;
        let consider = |best: &mut Option<(usize, f64)>, idx: usize| {
            let d = haversine_km(q, &self.points[idx]);
            let better = match *best {
                None => true,
                Some((b, bd)) => d < bd || (d == bd && self.ids[idx] < self.ids[b]),
            };
            if better {
                *best = Some((idx, d));
            }
        };
        let cos_bound = q.lat.abs().max(self.max_abs_lat).to_radians().cos();
        let max_ring = LAT_CELLS.max(LON_CELLS / 2 + 1);
        // bucket probes allowed before a full scan is cheaper
        let budget = 4 * self.points.len() as i64 + 64;
        let mut probes = 0i64;
        for r in 0..=max_ring {
            let lon_wraps = 2 * r + 1 >= LON_CELLS;
            probes += if lon_wraps { 2 * LON_CELLS + 2 * r } else { 8 * r.max(1) };
            if probes > budget {
                (0..self.points.len()).for_each(|idx| consider(&mut best, idx));
                break;
            }
            let mut visit = |i: i64, dj: i64| {
                if !(0..LAT_CELLS).contains(&i) {
                    return;
                }
                let j = (qj + dj).rem_euclid(LON_CELLS);
                if let Some(bucket) = self.buckets.get(&(i, j)) {
                    for &idx in bucket {
                        consider(&mut best, idx);
                    }
                }
            };
            if r == 0 {
                visit(qi, 0);
            } else if lon_wraps {
                // new rows span every column; inner rows only lack the side
                // columns on the ring where wrapping first occurs
                for dj in -(LON_CELLS / 2)..LON_CELLS - LON_CELLS / 2 {
                    visit(qi - r, dj);
                    visit(qi + r, dj);
                }
                if 2 * r - 1 < LON_CELLS {
                    for di in -r + 1..r {
                        visit(qi + di, -r);
                        visit(qi + di, r);
                    }
                }
            } else {
                for dj in -r..=r {
                    visit(qi - r, dj);
                    visit(qi + r, dj);
                }
                for di in -r + 1..r {
                    visit(qi + di, -r);
                    visit(qi + di, r);
                }
            }
            if let Some((_, bd)) = best {
                if self.unscanned_lower_bound(q, r, cos_bound) > bd {
                    break;
                }
            }
        }
        best.map(|(idx, d)| (self.ids[idx].as_str(), d))
    }

    /// Lower bound on the distance from `q` to any point outside the square
    /// of buckets within Chebyshev radius `r` of `q`'s bucket.
    fn unscanned_lower_bound(&self, q: &GeoPoint, r: i64, cos_bound: f64) -> f64 {
        let (qi, _) = key(q);
        let south = (qi - r) as f64 * CELL_DEG - 90.0;
        let north = (qi + r + 1) as f64 * CELL_DEG - 90.0;
        let south_gap = if qi - r <= 0 { f64::INFINITY } else { q.lat - south };
        let north_gap = if qi + r >= LAT_CELLS - 1 { f64::INFINITY } else { north - q.lat };
        let lat_gap = south_gap.min(north_gap).max(0.0);
        // slack absorbs rounding between bucket keys and bucket edges
        let lat_bound = EARTH_RADIUS_KM * lat_gap.to_radians() - SLACK_KM;
        if 2 * r + 1 >= LON_CELLS {
            return lat_bound;
        }
        let lon = q.lon + 180.0;
        let west = (lon / CELL_DEG).floor() * CELL_DEG - r as f64 * CELL_DEG;
        let east = west + (2 * r + 1) as f64 * CELL_DEG;
        let lon_gap = (lon - west).min(east - lon).max(0.0).min(180.0);
        // hav(d) ≥ cos φ₁ cos φ₂ hav(Δλ) ≥ cos²φmax hav(Δλ)
        let lon_bound = 2.0 * EARTH_RADIUS_KM * (cos_bound * (lon_gap.to_radians() / 2.0).sin()).asin();
        lat_bound.min(lon_bound - SLACK_KM)
    }
}
