use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{BBox, GeoError, GeoPoint};

/// Zoom level of every satellite tile in the system.
pub const SYSTEM_ZOOM: u8 = 12;
pub const MAX_ZOOM: u8 = 19;
/// Web-Mercator latitude clamp.
pub const MERCATOR_MAX_LAT: f64 = 85.05112878;

/// Slippy-map tile address. Serialized as the `"z/x/y"` key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TileId {
    pub zoom: u8,
    pub x: u32,
    pub y: u32,
}

impl TileId {
    pub fn new(zoom: u8, x: u32, y: u32) -> Result<Self, GeoError> {
        if zoom > MAX_ZOOM {
            return Err(GeoError::InvalidZoom(zoom));
        }
        let n = 1u32 << zoom;
        if x >= n || y >= n {
            return Err(GeoError::InvalidTile { zoom, x, y });
        }
        Ok(TileId { zoom, x, y })
    }

    pub fn center(&self) -> GeoPoint {
        tile_to_bbox(self).center()
    }
}

impl fmt::Display for TileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.zoom, self.x, self.y)
    }
}

impl FromStr for TileId {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GeoError::MalformedTileKey(s.to_string());
        let mut parts = s.split('/');
        let zoom = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let x = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let y = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        if parts.next().is_some() {
            return Err(bad());
        }
        TileId::new(zoom, x, y)
    }
}

impl Serialize for TileId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TileId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Tile containing `p` under the standard slippy-map Web-Mercator scheme.
pub fn latlon_to_tile(p: &GeoPoint, zoom: u8) -> Result<TileId, GeoError> {
    p.validate()?;
    if zoom > MAX_ZOOM {
        return Err(GeoError::InvalidZoom(zoom));
    }
    if p.lat.abs() > MERCATOR_MAX_LAT {
        return Err(GeoError::OutOfMercatorRange(p.lat));
    }
    let n = f64::from(1u32 << zoom);
    let max_index = (1u32 << zoom) - 1;
    let phi = p.lat.to_radians();
    let fx = (p.lon + 180.0) / 360.0 * n;
    let fy = (1.0 - (phi.tan() + 1.0 / phi.cos()).ln() / PI) / 2.0 * n;
    // lon = 180 and the clamp latitude land exactly on the far edge
    let x = (fx.floor().max(0.0) as u32).min(max_index);
    let y = (fy.floor().max(0.0) as u32).min(max_index);
    Ok(TileId { zoom, x, y })
}

fn tile_lat(y: f64, n: f64) -> f64 {
    (PI * (1.0 - 2.0 * y / n)).sinh().atan().to_degrees()
}

/// Geographic bounds of a tile.
pub fn tile_to_bbox(t: &TileId) -> BBox {
    let n = f64::from(1u32 << t.zoom);
    let (x, y) = (f64::from(t.x), f64::from(t.y));
    BBox {
        min: GeoPoint { lat: tile_lat(y + 1.0, n), lon: x / n * 360.0 - 180.0 },
        max: GeoPoint { lat: tile_lat(y, n), lon: (x + 1.0) / n * 360.0 - 180.0 },
    }
}
