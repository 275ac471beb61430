//! Image codecs and preprocessing, the NLR1 raster format, image manifests,
//! and the synthetic corpus generator.

mod image;
mod manifest;
mod nlr;
pub mod synth;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geo::GeoError;

pub use image::{
    augment, decode_image, decode_png_bytes, encode_png, preprocess, resize_bilinear, write_png, z_normalize,
    Augmentation, PreprocessPolicy, RgbImage,
};
pub use manifest::{read_counties, read_jsonl, write_jsonl, ImageKind, ImageRecord};
pub use nlr::{load_nightlight_raster, parse_nlr, save_nightlight_raster, serialize_nlr};
pub use synth::{synth_corpus, CorpusLayout, SynthConfig, SynthSummary};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: cannot decode image: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn format(path: &Path, message: impl Into<String>) -> Self {
        DataError::Format { path: path.to_path_buf(), message: message.into() }
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| DataError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| DataError::io(path, e))
}
