use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{BBox, GeoError, GeoPoint};

/// County boundary. The ring is stored as given; closure is implicit, so a
/// repeated first vertex at the end is accepted but not required.
///
/// On disk the ring is a list of `[lat, lon]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountyPolygon {
    pub county_id: String,
    pub name: String,
    #[serde(serialize_with = "ser_ring", deserialize_with = "de_ring")]
    pub ring: Vec<GeoPoint>,
}

fn ser_ring<S: Serializer>(ring: &[GeoPoint], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(ring.iter().map(|p| [p.lat, p.lon]))
}

fn de_ring<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<GeoPoint>, D::Error> {
    let pairs = Vec::<[f64; 2]>::deserialize(d)?;
    pairs
        .into_iter()
        .map(|[lat, lon]| GeoPoint::new(lat, lon).map_err(serde::de::Error::custom))
        .collect()
}

impl CountyPolygon {
    /// Ring vertices without the explicit closing duplicate.
    pub fn open_ring(&self) -> &[GeoPoint] {
        match (self.ring.first(), self.ring.last()) {
            (Some(a), Some(b)) if self.ring.len() > 1 && a == b => &self.ring[..self.ring.len() - 1],
            _ => &self.ring,
        }
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        let ring = self.open_ring();
        let mut distinct: Vec<(u64, u64)> = ring.iter().map(|p| (p.lat.to_bits(), p.lon.to_bits())).collect();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 3 {
            return Err(GeoError::InvalidPolygon(self.county_id.clone()));
        }
        Ok(())
    }

    pub fn bbox(&self) -> Option<BBox> {
        BBox::enclosing(self.ring.iter())
    }
}

/// Relative tolerance for the on-edge test.
const EDGE_EPS: f64 = 1e-12;

fn on_segment(p: &GeoPoint, a: &GeoPoint, b: &GeoPoint) -> bool {
    let (px, py) = (p.lon, p.lat);
    let (ax, ay) = (a.lon, a.lat);
    let (bx, by) = (b.lon, b.lat);
    if px < ax.min(bx) || px > ax.max(bx) || py < ay.min(by) || py > ay.max(by) {
        return false;
    }
    let cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
    let scale = (bx - ax).abs().max((by - ay).abs()).max(1.0);
    cross.abs() <= EDGE_EPS * scale * scale
}

/// Even-odd containment in lon/lat space. Points on the boundary are inside.
pub fn point_in_polygon(p: &GeoPoint, poly: &CountyPolygon) -> Result<bool, GeoError> {
    poly.validate()?;
    let ring = poly.open_ring();
    let n = ring.len();
    let mut inside = false;
    for i in 0..n {
        let a = &ring[i];
        let b = &ring[(i + 1) % n];
        if on_segment(p, a, b) {
            return Ok(true);
        }
        // half-open rule on latitude so a vertex is counted once
        if (a.lat > p.lat) != (b.lat > p.lat) {
            let x = a.lon + (p.lat - a.lat) / (b.lat - a.lat) * (b.lon - a.lon);
            if p.lon < x {
                inside = !inside;
            }
        }
    }
    Ok(inside)
}
