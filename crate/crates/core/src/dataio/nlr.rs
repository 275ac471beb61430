//! NLR1: an ASCII header line `NLR1 <rows> <cols> <origin_lat> <origin_lon>
//! <step>\n` followed by `rows·cols` little-endian `f32` values, row-major,
//! row 0 at the north edge.

use std::path::Path;

use super::{write_atomic, DataError};
use crate::geo::{NightlightRaster, RasterMeta};

const MAGIC: &str = "NLR1";
const MAX_HEADER: usize = 256;

pub fn serialize_nlr(raster: &NightlightRaster) -> Vec<u8> {
    let m = &raster.meta;
    let header = format!("{MAGIC} {} {} {} {} {}\n", m.rows, m.cols, m.origin_lat, m.origin_lon, m.step);
    let mut out = Vec::with_capacity(header.len() + 4 * raster.values.len());
    out.extend_from_slice(header.as_bytes());
    for v in &raster.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses an NLR1 image; `path` is used only for error context.
pub fn parse_nlr(bytes: &[u8], path: &Path) -> Result<NightlightRaster, DataError> {
    let bad = |m: String| DataError::format(path, m);
    let nl = bytes
        .iter()
        .take(MAX_HEADER)
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing NLR1 header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not ASCII".into()))?;
    let fields: Vec<&str> = header.split_ascii_whitespace().collect();
    if fields.first() != Some(&MAGIC) {
        return Err(bad(format!("bad magic in header {header:?}")));
    }
    if fields.len() != 6 {
        return Err(bad(format!("expected 6 header fields, found {}", fields.len())));
    }
    let int = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad integer {s:?} in header")));
    let float = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?} in header")));
    let meta = RasterMeta {
        rows: int(fields[1])?,
        cols: int(fields[2])?,
        origin_lat: float(fields[3])?,
        origin_lon: float(fields[4])?,
        step: float(fields[5])?,
    };
    meta.validate().map_err(|e| bad(e.to_string()))?;
    let payload = &bytes[nl + 1..];
    let expected = meta.rows.checked_mul(meta.cols).and_then(|n| n.checked_mul(4));
    if expected != Some(payload.len()) {
        return Err(bad(format!(
            "header declares {}x{} cells but payload holds {} bytes",
            meta.rows,
            meta.cols,
            payload.len()
        )));
    }
    let values = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    NightlightRaster::new(meta, values).map_err(|e| bad(e.to_string()))
}

pub fn load_nightlight_raster(path: &Path) -> Result<NightlightRaster, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    parse_nlr(&bytes, path)
}

pub fn save_nightlight_raster(path: &Path, raster: &NightlightRaster) -> Result<(), DataError> {
    write_atomic(path, &serialize_nlr(raster))
}
