use serde::{Deserialize, Serialize};

use super::{GeoError, GeoPoint, KM_PER_DEGREE};

/// Grid geometry of a nightlight raster. `origin_lat`/`origin_lon` are the
/// north-west corner; row 0 is the northernmost row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterMeta {
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub step: f64,
    pub rows: usize,
    pub cols: usize,
}

impl RasterMeta {
    /// Cell pitch of the VIIRS monthly composites.
    pub const VIIRS_STEP: f64 = 0.0041666667;

    pub fn validate(&self) -> Result<(), GeoError> {
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(GeoError::InvalidRaster(format!("step {} must be positive", self.step)));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(GeoError::InvalidRaster(format!("empty grid {}x{}", self.rows, self.cols)));
        }
        if !self.origin_lat.is_finite() || !self.origin_lon.is_finite() {
            return Err(GeoError::InvalidRaster("non-finite origin".into()));
        }
        Ok(())
    }

    pub fn cell_center(&self, row: usize, col: usize) -> GeoPoint {
        GeoPoint {
            lat: self.origin_lat - (row as f64 + 0.5) * self.step,
            lon: self.origin_lon + (col as f64 + 0.5) * self.step,
        }
    }

    pub fn south_lat(&self) -> f64 {
        self.origin_lat - self.rows as f64 * self.step
    }

    pub fn east_lon(&self) -> f64 {
        self.origin_lon + self.cols as f64 * self.step
    }
}

/// Nightlight radiance grid. Missing cells are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct NightlightRaster {
    pub meta: RasterMeta,
    pub values: Vec<f32>,
}

impl NightlightRaster {
    pub fn new(meta: RasterMeta, values: Vec<f32>) -> Result<Self, GeoError> {
        meta.validate()?;
        if values.len() != meta.rows * meta.cols {
            return Err(GeoError::InvalidRaster(format!(
                "{} values for a {}x{} grid",
                values.len(),
                meta.rows,
                meta.cols
            )));
        }
        Ok(NightlightRaster { meta, values })
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.meta.cols + col]
    }
}

/// Cell containing `p`. The north and west edges are inclusive, the south
/// and east edges exclusive.
pub fn raster_cell_index(meta: &RasterMeta, p: &GeoPoint) -> Result<(usize, usize), GeoError> {
    let out = || GeoError::OutOfBounds { lat: p.lat, lon: p.lon };
    let fr = ((meta.origin_lat - p.lat) / meta.step).floor();
    let fc = ((p.lon - meta.origin_lon) / meta.step).floor();
    if !(fr >= 0.0 && fc >= 0.0) || fr >= meta.rows as f64 || fc >= meta.cols as f64 {
        return Err(out());
    }
    Ok((fr as usize, fc as usize))
}

/// Mean of the non-missing cells whose centres fall inside the square of
/// side `side_km` centred on `center`.
pub fn nightlight_window_mean(raster: &NightlightRaster, center: &GeoPoint, side_km: f64) -> Result<f64, GeoError> {
    let meta = &raster.meta;
    let empty = || GeoError::EmptyWindow { lat: center.lat, lon: center.lon };
    if !(side_km > 0.0) {
        return Err(empty());
    }
    let half_lat = 0.5 * side_km / KM_PER_DEGREE;
    let half_lon = 0.5 * side_km / (KM_PER_DEGREE * center.lat.to_radians().cos());
    let (lat_lo, lat_hi) = (center.lat - half_lat, center.lat + half_lat);
    let (lon_lo, lon_hi) = (center.lon - half_lon, center.lon + half_lon);

    // candidate range padded by one cell; the exact centre test decides
    let clamp = |v: f64, n: usize| v.max(0.0).min(n as f64) as usize;
    let r0 = clamp(((meta.origin_lat - lat_hi) / meta.step).floor() - 1.0, meta.rows);
    let r1 = clamp(((meta.origin_lat - lat_lo) / meta.step).ceil() + 1.0, meta.rows);
    let c0 = clamp(((lon_lo - meta.origin_lon) / meta.step).floor() - 1.0, meta.cols);
    let c1 = clamp(((lon_hi - meta.origin_lon) / meta.step).ceil() + 1.0, meta.cols);

    let mut sum = 0.0f64;
    let mut count = 0usize;
    for row in r0..r1 {
        for col in c0..c1 {
            let c = meta.cell_center(row, col);
            if c.lat < lat_lo || c.lat > lat_hi || c.lon < lon_lo || c.lon > lon_hi {
                continue;
            }
            let v = raster.get(row, col);
            if v.is_nan() {
                continue;
            }
            sum += f64::from(v);
            count += 1;
        }
    }
    if count == 0 {
        return Err(empty());
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn meta(origin_lat: f64, origin_lon: f64, step: f64, rows: usize, cols: usize) -> RasterMeta {
        RasterMeta { origin_lat, origin_lon, step, rows, cols }
    }

    #[test]
    fn cell_index_examples() {
        let m = meta(10.0, 0.0, RasterMeta::VIIRS_STEP, 100, 100);
        assert_eq!(raster_cell_index(&m, &GeoPoint { lat: 10.0, lon: 0.0 }).unwrap(), (0, 0));
        let p = GeoPoint { lat: 10.0 - 0.5 * m.step, lon: 1.5 * m.step };
        assert_eq!(raster_cell_index(&m, &p).unwrap(), (0, 1));
        assert!(raster_cell_index(&m, &GeoPoint { lat: 10.1, lon: 0.0 }).is_err());
        assert!(raster_cell_index(&m, &GeoPoint { lat: 5.0, lon: -0.01 }).is_err());

        // global VIIRS origin: -180 sits half a cell east of the west edge
        let g = meta(75.00208333335, -180.00208333335, RasterMeta::VIIRS_STEP, 33600, 86401);
        assert_eq!(raster_cell_index(&g, &GeoPoint { lat: 0.0, lon: -180.0 }).unwrap().1, 0);
    }

    #[test]
    fn constant_and_small_windows() {
        let m = meta(1.0, 0.0, 0.5, 2, 2);
        let r = NightlightRaster::new(m, vec![7.0; 4]).unwrap();
        let c = GeoPoint { lat: 0.5, lon: 0.5 };
        assert_eq!(nightlight_window_mean(&r, &c, 200.0).unwrap(), 7.0);

        let r = NightlightRaster::new(m, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(nightlight_window_mean(&r, &c, 200.0).unwrap(), 2.5);
        // window covering just the north-west centre at (0.75, 0.25)
        let nw = GeoPoint { lat: 0.75, lon: 0.25 };
        assert_eq!(nightlight_window_mean(&r, &nw, 10.0).unwrap(), 1.0);
    }

    #[test]
    fn missing_cells_are_skipped_and_empty_window_errors() {
        let m = meta(1.0, 0.0, 0.5, 2, 2);
        let r = NightlightRaster::new(m, vec![f32::NAN, 2.0, 4.0, f32::NAN]).unwrap();
        assert_eq!(nightlight_window_mean(&r, &GeoPoint { lat: 0.5, lon: 0.5 }, 200.0).unwrap(), 3.0);
        let far = GeoPoint { lat: 40.0, lon: 40.0 };
        assert!(matches!(nightlight_window_mean(&r, &far, 5.0), Err(GeoError::EmptyWindow { .. })));
        let nw = GeoPoint { lat: 0.75, lon: 0.25 };
        assert!(nightlight_window_mean(&r, &nw, 10.0).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(NightlightRaster::new(meta(1.0, 0.0, 0.5, 2, 2), vec![0.0; 3]).is_err());
        assert!(NightlightRaster::new(meta(1.0, 0.0, 0.0, 2, 2), vec![0.0; 4]).is_err());
    }

    #[test]
    fn window_mean_matches_full_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = meta(31.0, 114.0, RasterMeta::VIIRS_STEP, 180, 200);
        let values: Vec<f32> = (0..m.rows * m.cols)
            .map(|_| if rng.random_bool(0.05) { f32::NAN } else { rng.random_range(0.0..60.0) })
            .collect();
        let r = NightlightRaster::new(m, values).unwrap();
        for _ in 0..50 {
            let center = GeoPoint {
                lat: rng.random_range(m.south_lat()..m.origin_lat),
                lon: rng.random_range(m.origin_lon..m.east_lon()),
            };
            let side = rng.random_range(0.5..12.0);
            let half_lat = 0.5 * side / KM_PER_DEGREE;
            let half_lon = 0.5 * side / (KM_PER_DEGREE * center.lat.to_radians().cos());
            let (mut sum, mut n) = (0.0f64, 0usize);
            for row in 0..m.rows {
                for col in 0..m.cols {
                    let c = m.cell_center(row, col);
                    let v = r.get(row, col);
                    if (c.lat - center.lat).abs() <= half_lat && (c.lon - center.lon).abs() <= half_lon && !v.is_nan() {
                        sum += f64::from(v);
                        n += 1;
                    }
                }
            }
            let got = nightlight_window_mean(&r, &center, side);
            if n == 0 {
                assert!(got.is_err());
            } else {
                let want = sum / n as f64;
                assert!((got.unwrap() - want).abs() <= 1e-9 * want.abs().max(1.0));
            }
        }
    }
}
