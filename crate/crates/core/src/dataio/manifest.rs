use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{write_atomic, DataError};
use crate::geo::{CountyPolygon, GeoPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageKind {
    Satellite,
    Streetview,
}

/// One image in a manifest. `path` is relative to the corpus root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub kind: ImageKind,
    pub location: GeoPoint,
    /// Street-view camera heading in degrees; absent for satellite tiles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heading: Option<u16>,
    pub path: String,
    pub width: u32,
    pub height: u32,
}

pub const HEADINGS: [u16; 4] = [0, 90, 180, 270];

impl ImageRecord {
    pub fn validate(&self) -> Result<(), DataError> {
        self.location.validate()?;
        match (self.kind, self.heading) {
            (ImageKind::Satellite, None) => {}
            (ImageKind::Satellite, Some(_)) => {
                return Err(DataError::Parameter(format!("satellite record {} carries a heading", self.id)))
            }
            (ImageKind::Streetview, Some(h)) if HEADINGS.contains(&h) => {}
            (ImageKind::Streetview, h) => {
                return Err(DataError::Parameter(format!("street view {} has heading {h:?}", self.id)))
            }
        }
        if self.id.is_empty() || self.width == 0 || self.height == 0 {
            return Err(DataError::Parameter(format!("record {:?} has an empty id or size", self.id)));
        }
        Ok(())
    }
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DataError> {
    let file = std::fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| DataError::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), DataError> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).map_err(|e| DataError::format(path, e.to_string()))?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Reads and validates a county polygon file.
pub fn read_counties(path: &Path) -> Result<Vec<CountyPolygon>, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    let counties: Vec<CountyPolygon> =
        serde_json::from_slice(&bytes).map_err(|e| DataError::format(path, e.to_string()))?;
    for c in &counties {
        c.validate()?;
    }
    Ok(counties)
}
