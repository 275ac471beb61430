//! Coordinates, Web-Mercator tile addressing, great-circle distances,
//! nightlight raster indexing and county polygon containment.
//!
//! Everything in here is a pure function over immutable values and can be
//! called from any thread.

mod polygon;
mod raster;
mod tile;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use polygon::{point_in_polygon, CountyPolygon};
pub use raster::{nightlight_window_mean, raster_cell_index, NightlightRaster, RasterMeta};
pub use tile::{latlon_to_tile, tile_to_bbox, TileId, MAX_ZOOM, MERCATOR_MAX_LAT, SYSTEM_ZOOM};

/// Mean Earth radius used for every distance in the system.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Kilometres per degree of latitude (and of longitude at the equator) used
/// for the locally flat km → degree conversion of label windows.
pub const KM_PER_DEGREE: f64 = 111.195;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("invalid coordinate lat={lat}, lon={lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("latitude {0} is outside the Web-Mercator range ±{MERCATOR_MAX_LAT}")]
    OutOfMercatorRange(f64),
    #[error("zoom {0} is outside 0..={MAX_ZOOM}")]
    InvalidZoom(u8),
    #[error("tile {zoom}/{x}/{y} is outside the tile grid")]
    InvalidTile { zoom: u8, x: u32, y: u32 },
    #[error("malformed tile key {0:?}")]
    MalformedTileKey(String),
    #[error("invalid bounding box: {0}")]
    InvalidBBox(String),
    #[error("polygon {0:?} has fewer than 3 distinct vertices")]
    InvalidPolygon(String),
    #[error("invalid raster metadata: {0}")]
    InvalidRaster(String),
    #[error("point ({lat}, {lon}) is outside the raster extent")]
    OutOfBounds { lat: f64, lon: f64 },
    #[error("label window around ({lat}, {lon}) covers no valid raster cell")]
    EmptyWindow { lat: f64, lon: f64 },
}

/// A WGS-84 position in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        let p = GeoPoint { lat, lon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        let ok = self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon);
        if ok {
            Ok(())
        } else {
            Err(GeoError::InvalidCoordinate { lat: self.lat, lon: self.lon })
        }
    }
}

/// Axis-aligned lat/lon rectangle, inclusive on every edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min: GeoPoint,
    pub max: GeoPoint,
}

impl BBox {
    pub fn new(min: GeoPoint, max: GeoPoint) -> Result<Self, GeoError> {
        min.validate()?;
        max.validate()?;
        if min.lat > max.lat || min.lon > max.lon {
            return Err(GeoError::InvalidBBox(format!(
                "min ({}, {}) exceeds max ({}, {})",
                min.lat, min.lon, max.lat, max.lon
            )));
        }
        Ok(BBox { min, max })
    }

    pub fn from_bounds(min_lat: f64, min_lon: f64, max_lat: f64, max_lon: f64) -> Result<Self, GeoError> {
        BBox::new(GeoPoint { lat: min_lat, lon: min_lon }, GeoPoint { lat: max_lat, lon: max_lon })
    }

    pub fn center(&self) -> GeoPoint {
        GeoPoint {
            lat: 0.5 * (self.min.lat + self.max.lat),
            lon: 0.5 * (self.min.lon + self.max.lon),
        }
    }

    pub fn contains(&self, p: &GeoPoint) -> bool {
        p.lat >= self.min.lat && p.lat <= self.max.lat && p.lon >= self.min.lon && p.lon <= self.max.lon
    }

    /// True when the box has zero extent along either axis.
    pub fn is_degenerate(&self) -> bool {
        self.min.lat >= self.max.lat || self.min.lon >= self.max.lon
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.min.lat <= other.max.lat
            && other.min.lat <= self.max.lat
            && self.min.lon <= other.max.lon
            && other.min.lon <= self.max.lon
    }

    /// Smallest box containing every point, or `None` for an empty iterator.
    pub fn enclosing<'a>(points: impl IntoIterator<Item = &'a GeoPoint>) -> Option<BBox> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let (mut min, mut max) = (first, first);
        for p in it {
            min.lat = min.lat.min(p.lat);
            min.lon = min.lon.min(p.lon);
            max.lat = max.lat.max(p.lat);
            max.lon = max.lon.max(p.lon);
        }
        Some(BBox { min, max })
    }
}

/// Great-circle distance in kilometres (haversine, spherical Earth).
pub fn haversine_km(a: &GeoPoint, b: &GeoPoint) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dphi = (b.lat - a.lat).to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi * 0.5).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda * 0.5).sin().powi(2);
    // rounding can push h marginally past 1 for antipodal points
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}
