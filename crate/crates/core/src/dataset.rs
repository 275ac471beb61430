//! Glue between a corpus directory, pair construction and model samples.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::align::{build_pairs, AlignError, AlignedPair, PairOptions, PairOutcome};
use crate::dataio::{
    decode_image, load_nightlight_raster, preprocess, read_jsonl, CorpusLayout, DataError, ImageRecord,
    PreprocessPolicy, RgbImage,
};
use crate::geo::NightlightRaster;
use crate::model::Sample;

/// Manifests and raster of one period.
#[derive(Debug, Clone)]
pub struct PeriodInputs {
    pub period: String,
    pub satellites: Vec<ImageRecord>,
    pub streetviews: Vec<ImageRecord>,
    pub raster: NightlightRaster,
}

pub fn load_period(layout: &CorpusLayout, period: &str) -> Result<PeriodInputs, DataError> {
    let satellites: Vec<ImageRecord> = read_jsonl(&layout.satellite_manifest(period))?;
    let streetviews: Vec<ImageRecord> = read_jsonl(&layout.streetview_manifest(period))?;
    for r in satellites.iter().chain(&streetviews) {
        r.validate()?;
    }
    let raster = load_nightlight_raster(&layout.raster(period))?;
    Ok(PeriodInputs { period: period.to_string(), satellites, streetviews, raster })
}

pub fn align_period(inputs: &PeriodInputs, opts: &PairOptions) -> Result<PairOutcome, AlignError> {
    build_pairs(&inputs.satellites, &inputs.streetviews, &inputs.raster, opts)
}

/// A pair with both images decoded.
#[derive(Debug, Clone)]
pub struct PairImages {
    pub pair: AlignedPair,
    pub sat: RgbImage,
    pub sv: RgbImage,
}

/// Decodes the images of every pair, in pair order.
pub fn load_pair_images(
    layout: &CorpusLayout,
    inputs: &PeriodInputs,
    pairs: &[AlignedPair],
) -> Result<Vec<PairImages>, DataError> {
    let by_id: HashMap<&str, &ImageRecord> =
        inputs.satellites.iter().chain(&inputs.streetviews).map(|r| (r.id.as_str(), r)).collect();
    let lookup = |id: &str| {
        by_id.get(id).copied().ok_or_else(|| DataError::Parameter(format!("pair references unknown record {id}")))
    };
    pairs
        .iter()
        .map(|p| {
            let sat = decode_image(&layout.resolve(&lookup(&p.sat_id)?.path))?;
            let sv = decode_image(&layout.resolve(&lookup(&p.sv_id)?.path))?;
            Ok(PairImages { pair: p.clone(), sat, sv })
        })
        .collect()
}

/// Per-branch normalization statistics fitted on the given pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchPolicies {
    pub sat: PreprocessPolicy,
    pub sv: PreprocessPolicy,
}

pub fn fit_policies(pairs: &[PairImages], side: usize) -> Result<BranchPolicies, DataError> {
    Ok(BranchPolicies {
        sat: PreprocessPolicy::fit(pairs.iter().map(|p| &p.sat), side)?,
        sv: PreprocessPolicy::fit(pairs.iter().map(|p| &p.sv), side)?,
    })
}

/// Model samples keyed by satellite id.
pub fn to_samples(pairs: &[PairImages], policies: &BranchPolicies) -> Vec<Sample> {
    pairs
        .iter()
        .map(|p| Sample {
            id: p.pair.sat_id.clone(),
            sat: preprocess(&p.sat, &policies.sat),
            sv: preprocess(&p.sv, &policies.sv),
            label: p.pair.label,
        })
        .collect()
}
