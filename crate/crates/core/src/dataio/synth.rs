//! Deterministic synthetic corpus: a smooth latent development field drives
//! building density in satellite tiles, window-column density in street
//! views, and the nightlight raster.
//!
//! Output tree under the corpus root:
//!
//! ```text
//! corpus.json                      summary and generator config
//! counties.json                    county polygons
//! ground_truth.json                latent values at every tile centre
//! manifests/<period>/satellite.jsonl
//! manifests/<period>/streetview.jsonl
//! images/<period>/sat/<x>_<y>.png
//! images/<period>/sv/<x>_<y>_<k>_h<heading>.png
//! nightlight/<period>.nlr
//! ```

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{ImageKind, ImageRecord, HEADINGS};
use super::{save_nightlight_raster, write_atomic, write_jsonl, write_png, DataError, RgbImage};
use crate::geo::{
    latlon_to_tile, tile_to_bbox, BBox, CountyPolygon, GeoPoint, NightlightRaster, RasterMeta, TileId,
    KM_PER_DEGREE, SYSTEM_ZOOM,
};
use crate::numerics::{seeded_rng, Rng};

pub const SAT_SIDE: usize = 256;
pub const SV_WIDTH: usize = 480;
pub const SV_HEIGHT: usize = 320;
/// Spacing of street-view captures along a road.
pub const SV_SPACING_KM: f64 = 0.110;

const BLOCKS: usize = 8;
const RASTER_MARGIN_DEG: f64 = 0.1;
const DEFAULT_ORIGIN: (f64, f64) = (30.6, 114.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Satellite tiles per period; each yields one candidate pair.
    pub n_pairs: usize,
    /// Tiles are drawn from those whose centre lies in the region. When
    /// absent, a compact block of tiles near a fixed origin is used.
    pub region: Option<BBox>,
    pub periods: Vec<String>,
    /// Street-view capture points along each tile's road.
    pub sv_per_tile: usize,
    /// Headings rendered at every capture point.
    pub headings: Vec<u16>,
    /// Street views follow a second, independent field that also contributes
    /// to the nightlight label, instead of a noisy copy of the satellite
    /// field.
    pub complementary: bool,
    pub counties_per_side: usize,
    /// Relative growth of the development field per period.
    pub growth_per_period: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_pairs: 512,
            region: None,
            periods: vec!["2023".into()],
            sv_per_tile: 4,
            headings: vec![0],
            complementary: false,
            counties_per_side: 3,
            growth_per_period: 0.08,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Parameter(m.into()));
        if self.n_pairs == 0 {
            return bad("n_pairs must be at least 1");
        }
        if self.periods.is_empty() || self.periods.iter().any(|p| !valid_period(p)) {
            return bad("periods must be non-empty labels of letters, digits, '-' or '_'");
        }
        let mut sorted = self.periods.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.periods.len() {
            return bad("periods must be distinct");
        }
        if self.sv_per_tile == 0 || self.headings.is_empty() || self.headings.iter().any(|h| !HEADINGS.contains(h)) {
            return bad("need at least one street view per tile and headings from {0, 90, 180, 270}");
        }
        if self.counties_per_side == 0 {
            return bad("counties_per_side must be positive");
        }
        if !(self.growth_per_period.is_finite() && self.growth_per_period >= 0.0) {
            return bad("growth_per_period must be non-negative");
        }
        if let Some(r) = &self.region {
            if r.is_degenerate() {
                return bad("region has zero area");
            }
        }
        Ok(())
    }
}

fn valid_period(p: &str) -> bool {
    !p.is_empty() && p.len() <= 32 && p.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// Path conventions of a corpus directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusLayout {
    pub root: PathBuf,
}

impl CorpusLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        CorpusLayout { root: root.into() }
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("corpus.json")
    }

    pub fn counties(&self) -> PathBuf {
        self.root.join("counties.json")
    }

    pub fn ground_truth(&self) -> PathBuf {
        self.root.join("ground_truth.json")
    }

    pub fn satellite_manifest(&self, period: &str) -> PathBuf {
        self.root.join("manifests").join(period).join("satellite.jsonl")
    }

    pub fn streetview_manifest(&self, period: &str) -> PathBuf {
        self.root.join("manifests").join(period).join("streetview.jsonl")
    }

    pub fn raster(&self, period: &str) -> PathBuf {
        self.root.join("nightlight").join(format!("{period}.nlr"))
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn read_summary(&self) -> Result<SynthSummary, DataError> {
        let path = self.summary();
        let bytes = std::fs::read(&path).map_err(|e| DataError::io(&path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| DataError::format(&path, e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub config: SynthConfig,
    /// Union of the generated tiles' bounds.
    pub region: BBox,
    pub periods: Vec<String>,
    pub satellite_per_period: usize,
    pub streetview_per_period: usize,
    pub raster: RasterMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileTruth {
    pub tile: TileId,
    pub center: GeoPoint,
    /// Latent development driving the satellite image.
    pub development: f64,
    /// Noise-free label field (before radiance scaling) at the tile centre.
    pub label_field: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodTruth {
    pub period: String,
    pub tiles: Vec<TileTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `radiance = radiance_offset + radiance_scale · label_field + noise`.
    pub radiance_offset: f64,
    pub radiance_scale: f64,
    pub periods: Vec<PeriodTruth>,
}

const RADIANCE_OFFSET: f64 = 1.0;
const RADIANCE_SCALE: f64 = 40.0;
const RADIANCE_NOISE: f64 = 1.0;
const MISSING_RATE: f64 = 0.001;
const SV_NOISE_ROAD: f64 = 0.04;
const SV_NOISE_POINT: f64 = 0.015;
/// Share of the label carried by the street-view field in complementary
/// corpora.
const COMPLEMENTARY_WEIGHT: f64 = 0.4;

/// Independent stream for a sub-task of the generator.
fn sub_rng(seed: u64, a: u64, b: u64) -> Rng {
    let mut s = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [a, b] {
        s = s.wrapping_add(v.wrapping_mul(0xbf58_476d_1ce4_e5b9)).rotate_left(27);
        s ^= s >> 31;
        s = s.wrapping_mul(0x94d0_49bb_1331_11eb);
    }
    Rng::seed_from_u64(s)
}

#[derive(Debug, Clone)]
struct Bump {
    lat: f64,
    lon: f64,
    sigma: f64,
    amp: f64,
}

/// Sum of Gaussian bumps, rescaled so the sampled tile centres span [0, 1].
#[derive(Debug, Clone)]
struct Field {
    bumps: Vec<Bump>,
    lo: f64,
    hi: f64,
}

impl Field {
    fn random(rng: &mut Rng, region: &BBox, centers: &[GeoPoint]) -> Field {
        let (h, w) = (region.max.lat - region.min.lat, region.max.lon - region.min.lon);
        let extent = h.max(w);
        let n = rng.random_range(6..=10);
        let bumps = (0..n)
            .map(|_| Bump {
                lat: region.min.lat - 0.1 * h + rng.random::<f64>() * 1.2 * h,
                lon: region.min.lon - 0.1 * w + rng.random::<f64>() * 1.2 * w,
                sigma: extent * rng.random_range(0.12..0.3),
                amp: rng.random_range(0.3..1.0),
            })
            .collect();
        let mut f = Field { bumps, lo: 0.0, hi: 1.0 };
        let raw: Vec<f64> = centers.iter().map(|p| f.raw(p)).collect();
        f.lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        f.hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(f.hi - f.lo > 1e-9) {
            f.hi = f.lo + 1.0;
        }
        f
    }

    fn raw(&self, p: &GeoPoint) -> f64 {
        self.bumps
            .iter()
            .map(|b| {
                let d2 = (p.lat - b.lat).powi(2) + (p.lon - b.lon).powi(2);
                b.amp * (-d2 / (2.0 * b.sigma * b.sigma)).exp()
            })
            .sum()
    }

    fn at(&self, p: &GeoPoint, growth: f64) -> f64 {
        let base = ((self.raw(p) - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0);
        (base * growth).min(1.0)
    }
}

fn choose_tiles(cfg: &SynthConfig, rng: &mut Rng) -> Result<Vec<TileId>, DataError> {
    match &cfg.region {
        None => {
            let origin = latlon_to_tile(&GeoPoint::new(DEFAULT_ORIGIN.0, DEFAULT_ORIGIN.1)?, SYSTEM_ZOOM)?;
            let side = (cfg.n_pairs as f64).sqrt().ceil() as u32;
            let mut tiles = Vec::with_capacity(cfg.n_pairs);
            'outer: for dy in 0..side {
                for dx in 0..side {
                    if tiles.len() == cfg.n_pairs {
                        break 'outer;
                    }
                    tiles.push(TileId::new(SYSTEM_ZOOM, origin.x + dx, origin.y + dy)?);
                }
            }
            Ok(tiles)
        }
        Some(region) => {
            let lo = latlon_to_tile(&GeoPoint { lat: region.max.lat, lon: region.min.lon }, SYSTEM_ZOOM)?;
            let hi = latlon_to_tile(&GeoPoint { lat: region.min.lat, lon: region.max.lon }, SYSTEM_ZOOM)?;
            let mut tiles = Vec::new();
            for y in lo.y..=hi.y {
                for x in lo.x..=hi.x {
                    let t = TileId::new(SYSTEM_ZOOM, x, y)?;
                    if region.contains(&t.center()) {
                        tiles.push(t);
                    }
                }
            }
            if tiles.len() < cfg.n_pairs {
                return Err(DataError::Parameter(format!(
                    "region holds {} zoom-{SYSTEM_ZOOM} tiles, fewer than the {} requested",
                    tiles.len(),
                    cfg.n_pairs
                )));
            }
            tiles.shuffle(rng);
            tiles.truncate(cfg.n_pairs);
            tiles.sort_by_key(|t| (t.y, t.x));
            Ok(tiles)
        }
    }
}

fn offset_km(p: &GeoPoint, north_km: f64, east_km: f64) -> GeoPoint {
    GeoPoint {
        lat: p.lat + north_km / KM_PER_DEGREE,
        lon: p.lon + east_km / (KM_PER_DEGREE * p.lat.to_radians().cos()),
    }
}

fn jitter(rng: &mut Rng, base: u8, spread: i32) -> u8 {
    (base as i32 + rng.random_range(-spread..=spread)).clamp(0, 255) as u8
}

/// Vegetation background with `round(fraction · 64)` of the 8×8 blocks
/// carrying a bright roof. Block order and roof geometry depend only on
/// `rng`, so growth adds roofs without moving existing ones.
fn render_satellite(rng: &mut Rng, fraction: f64) -> RgbImage {
    let veg = [jitter(rng, 62, 6), jitter(rng, 112, 8), jitter(rng, 54, 6)];
    let mut img = RgbImage::filled(SAT_SIDE, SAT_SIDE, veg);
    let mut order: Vec<usize> = (0..BLOCKS * BLOCKS).collect();
    order.shuffle(rng);
    let cell = SAT_SIDE / BLOCKS;
    let roofs: Vec<(usize, usize, usize, usize, [u8; 3])> = order
        .iter()
        .map(|&b| {
            let (bx, by) = ((b % BLOCKS) * cell, (b / BLOCKS) * cell);
            let (l, r, t, d) =
                (rng.random_range(2..6), rng.random_range(2..6), rng.random_range(2..6), rng.random_range(2..6));
            let g = rng.random_range(175..225u8);
            (bx + l, by + t, bx + cell - r, by + cell - d, [g, g, jitter(rng, g, 6)])
        })
        .collect();
    let built = ((fraction.clamp(0.0, 1.0) * (BLOCKS * BLOCKS) as f64).round() as usize).min(BLOCKS * BLOCKS);
    for &(x0, y0, x1, y1, color) in &roofs[..built] {
        img.fill_rect(x0, y0, x1, y1, color);
    }
    img
}

/// Sky, facade and street bands; the facade carries `2 + 38·density` dark
/// window columns.
fn render_streetview(rng: &mut Rng, density: f64) -> RgbImage {
    let mut img = RgbImage::filled(SV_WIDTH, SV_HEIGHT, [jitter(rng, 205, 6), jitter(rng, 196, 6), jitter(rng, 170, 6)]);
    let sky = rng.random_range(56..72);
    let street = SV_HEIGHT - rng.random_range(56..72);
    img.fill_rect(0, 0, SV_WIDTH, sky, [jitter(rng, 150, 8), jitter(rng, 190, 8), jitter(rng, 235, 6)]);
    img.fill_rect(0, street, SV_WIDTH, SV_HEIGHT, [jitter(rng, 92, 6), jitter(rng, 92, 6), jitter(rng, 96, 6)]);
    let n = (2.0 + 38.0 * density.clamp(0.0, 1.0)).round() as usize;
    let slot = SV_WIDTH as f64 / n as f64;
    for i in 0..n {
        let width = rng.random_range(4..9usize);
        let start = (i as f64 * slot) as usize;
        let room = (slot as usize).saturating_sub(width).max(1);
        let x0 = start + rng.random_range(0..room);
        let color = [jitter(rng, 42, 6), jitter(rng, 60, 6), jitter(rng, 112, 8)];
        img.fill_rect(x0, sky + 4, x0 + width, street - 4, color);
    }
    img
}

/// County grid over `region` whose interior lattice vertices are jittered,
/// so neighbouring polygons share edges exactly.
fn county_grid(rng: &mut Rng, region: &BBox, n: usize) -> Vec<CountyPolygon> {
    let (h, w) = ((region.max.lat - region.min.lat) / n as f64, (region.max.lon - region.min.lon) / n as f64);
    let mut lattice = vec![vec![GeoPoint { lat: 0.0, lon: 0.0 }; n + 1]; n + 1];
    for (i, row) in lattice.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let interior = i > 0 && i < n && j > 0 && j < n;
            let (dl, dn) = if interior {
                (rng.random_range(-0.15..0.15) * h, rng.random_range(-0.15..0.15) * w)
            } else {
                (0.0, 0.0)
            };
            *v = GeoPoint { lat: region.min.lat + i as f64 * h + dl, lon: region.min.lon + j as f64 * w + dn };
        }
    }
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(CountyPolygon {
                county_id: format!("county-{i:02}-{j:02}"),
                name: format!("County {}{}", (b'A' + (i % 26) as u8) as char, j + 1),
                ring: vec![lattice[i][j], lattice[i][j + 1], lattice[i + 1][j + 1], lattice[i + 1][j]],
            });
        }
    }
    out
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| DataError::format(path, e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Generates a corpus under `root`. Identical configs produce byte-identical
/// trees.
pub fn synth_corpus(cfg: &SynthConfig, root: &Path) -> Result<SynthSummary, DataError> {
    cfg.validate()?;
    let layout = CorpusLayout::new(root);
    let mut rng = seeded_rng(cfg.seed);
    let tiles = choose_tiles(cfg, &mut rng)?;
    let centers: Vec<GeoPoint> = tiles.iter().map(TileId::center).collect();
    let corners: Vec<GeoPoint> = tiles.iter().flat_map(|t| [tile_to_bbox(t).min, tile_to_bbox(t).max]).collect();
    let region = BBox::enclosing(&corners).expect("at least one tile");

    let sat_field = Field::random(&mut rng, &region, &centers);
    let sv_field = if cfg.complementary { Some(Field::random(&mut rng, &region, &centers)) } else { None };
    let counties = county_grid(&mut rng, &region, cfg.counties_per_side);
    let label_at = |p: &GeoPoint, growth: f64| match &sv_field {
        Some(f) => (1.0 - COMPLEMENTARY_WEIGHT) * sat_field.at(p, growth) + COMPLEMENTARY_WEIGHT * f.at(p, growth),
        None => sat_field.at(p, growth),
    };

    let meta = RasterMeta {
        origin_lat: region.max.lat + RASTER_MARGIN_DEG,
        origin_lon: region.min.lon - RASTER_MARGIN_DEG,
        step: RasterMeta::VIIRS_STEP,
        rows: ((region.max.lat - region.min.lat + 2.0 * RASTER_MARGIN_DEG) / RasterMeta::VIIRS_STEP).ceil() as usize,
        cols: ((region.max.lon - region.min.lon + 2.0 * RASTER_MARGIN_DEG) / RasterMeta::VIIRS_STEP).ceil() as usize,
    };
    let noise = Normal::new(0.0, 1.0).expect("unit normal");

    let mut truth = GroundTruth { radiance_offset: RADIANCE_OFFSET, radiance_scale: RADIANCE_SCALE, periods: Vec::new() };
    let mut sv_count = 0;
    for (pi, period) in cfg.periods.iter().enumerate() {
        let growth = 1.0 + cfg.growth_per_period * pi as f64;

        let mut raster_rng = sub_rng(cfg.seed, 1, pi as u64);
        let mut values = Vec::with_capacity(meta.rows * meta.cols);
        for r in 0..meta.rows {
            for c in 0..meta.cols {
                let p = meta.cell_center(r, c);
                let v = RADIANCE_OFFSET + RADIANCE_SCALE * label_at(&p, growth) + RADIANCE_NOISE * noise.sample(&mut raster_rng);
                let missing = raster_rng.random_bool(MISSING_RATE);
                values.push(if missing { f32::NAN } else { v as f32 });
            }
        }
        let raster = NightlightRaster::new(meta, values)?;
        save_nightlight_raster(&layout.raster(period), &raster)?;

        let mut sats = Vec::with_capacity(tiles.len());
        let mut svs = Vec::with_capacity(tiles.len() * cfg.sv_per_tile * cfg.headings.len());
        let mut period_truth = PeriodTruth { period: period.clone(), tiles: Vec::with_capacity(tiles.len()) };
        for (ti, (tile, center)) in tiles.iter().zip(&centers).enumerate() {
            let development = sat_field.at(center, growth);
            period_truth.tiles.push(TileTruth {
                tile: *tile,
                center: *center,
                development,
                label_field: label_at(center, growth),
            });

            let rel = format!("images/{period}/sat/{}_{}.png", tile.x, tile.y);
            let mut tile_rng = sub_rng(cfg.seed, 2, ti as u64);
            write_png(&layout.resolve(&rel), &render_satellite(&mut tile_rng, 0.05 + 0.85 * development))?;
            sats.push(ImageRecord {
                id: format!("sat-{period}-{}-{}", tile.x, tile.y),
                kind: ImageKind::Satellite,
                location: *center,
                heading: None,
                path: rel,
                width: SAT_SIDE as u32,
                height: SAT_SIDE as u32,
            });

            // Road geometry is fixed per tile; only the captured scene changes
            // between periods.
            let mut road_rng = sub_rng(cfg.seed, 3, ti as u64);
            let anchor = offset_km(center, road_rng.random_range(-0.3..0.3), road_rng.random_range(-0.3..0.3));
            let theta = road_rng.random_range(0.0..std::f64::consts::PI);
            let points: Vec<GeoPoint> = (0..cfg.sv_per_tile)
                .map(|k| {
                    let along = (k as f64 - (cfg.sv_per_tile as f64 - 1.0) / 2.0) * SV_SPACING_KM;
                    let (jn, je) = (0.01 * noise.sample(&mut road_rng), 0.01 * noise.sample(&mut road_rng));
                    offset_km(&anchor, along * theta.sin() + jn, along * theta.cos() + je)
                })
                .collect();
            let mut scene_rng = sub_rng(cfg.seed, 4 + pi as u64, ti as u64);
            let road_noise = SV_NOISE_ROAD * noise.sample(&mut scene_rng);
            for (k, p) in points.iter().enumerate() {
                let base = match &sv_field {
                    Some(f) => f.at(p, growth),
                    None => sat_field.at(p, growth),
                };
                let density = base + road_noise + SV_NOISE_POINT * noise.sample(&mut scene_rng);
                for &h in &cfg.headings {
                    let rel = format!("images/{period}/sv/{}_{}_{k}_h{h}.png", tile.x, tile.y);
                    write_png(&layout.resolve(&rel), &render_streetview(&mut scene_rng, density))?;
                    svs.push(ImageRecord {
                        id: format!("sv-{period}-{}-{}-{k}-h{h:03}", tile.x, tile.y),
                        kind: ImageKind::Streetview,
                        location: *p,
                        heading: Some(h),
                        path: rel,
                        width: SV_WIDTH as u32,
                        height: SV_HEIGHT as u32,
                    });
                }
            }
        }
        sv_count = svs.len();
        write_jsonl(&layout.satellite_manifest(period), &sats)?;
        write_jsonl(&layout.streetview_manifest(period), &svs)?;
        truth.periods.push(period_truth);
    }

    write_json(&layout.counties(), &counties)?;
    write_json(&layout.ground_truth(), &truth)?;
    let summary = SynthSummary {
        config: cfg.clone(),
        region,
        periods: cfg.periods.clone(),
        satellite_per_period: tiles.len(),
        streetview_per_period: sv_count,
        raster: meta,
    };
    write_json(&layout.summary(), &summary)?;
    Ok(summary)
}

pub fn read_ground_truth(layout: &CorpusLayout) -> Result<GroundTruth, DataError> {
    let path = layout.ground_truth();
    let bytes = std::fs::read(&path).map_err(|e| DataError::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| DataError::format(&path, e.to_string()))
}
