use std::io::Cursor;
use std::path::Path;

use ::image::{ImageFormat, ImageReader};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{write_atomic, DataError};
use crate::numerics::{Rng, Tensor};

/// 8-bit RGB image stored channel-first: `data[(c·h + y)·w + x]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, DataError> {
        if width == 0 || height == 0 || data.len() != 3 * width * height {
            return Err(DataError::Parameter(format!(
                "{} bytes for a 3x{height}x{width} image",
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in color {
            data.extend(std::iter::repeat_n(c, width * height));
        }
        RgbImage { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, color: [u8; 3]) {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        for (c, v) in color.into_iter().enumerate() {
            self.data[c * plane + i] = v;
        }
    }

    /// Paints `[x0, x1) × [y0, y1)`, clipped to the image.
    pub fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, color: [u8; 3]) {
        let (x1, y1) = (x1.min(self.width), y1.min(self.height));
        for y in y0..y1 {
            for x in x0..x1 {
                self.set(x, y, color);
            }
        }
    }

    /// `3×H×W` tensor of raw 0–255 values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![3, self.height, self.width], self.data.iter().map(|&v| v as f64).collect())
            .expect("image dimensions are non-zero")
    }
}

/// Decodes PNG bytes; any colour type is converted to 8-bit RGB with alpha
/// dropped.
pub fn decode_png_bytes(bytes: &[u8]) -> Result<RgbImage, String> {
    let img = ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png)
        .decode()
        .map_err(|e| e.to_string())?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let mut data = vec![0u8; raw.len()];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = px[c];
        }
    }
    RgbImage::new(w, h, data).map_err(|e| e.to_string())
}

pub fn decode_image(path: &Path) -> Result<RgbImage, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_png_bytes(&bytes).map_err(|message| DataError::Decode { path: path.to_path_buf(), message })
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let plane = img.width * img.height;
    let mut interleaved = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        interleaved.extend([img.data[i], img.data[plane + i], img.data[2 * plane + i]]);
    }
    let buf = ::image::RgbImage::from_raw(img.width as u32, img.height as u32, interleaved)
        .expect("buffer length matches dimensions");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encoding does not fail");
    out.into_inner()
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<(), DataError> {
    write_atomic(path, &encode_png(img))
}

/// Bilinear resampling of a `C×H×W` tensor with half-pixel centres: output
/// pixel `x` samples source coordinate `(x + 0.5)·W/w − 0.5`, clamped to the
/// edge pixels.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let &[ch, h, w] = t.shape() else {
        panic!("resize_bilinear expects a C×H×W tensor, got {:?}", t.shape());
    };
    assert!(out_h > 0 && out_w > 0, "output size must be positive");
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    let src = t.data();
    let mut out = Vec::with_capacity(ch * out_h * out_w);
    for c in 0..ch {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            let (r0, r1) = (&plane[y0 * w..(y0 + 1) * w], &plane[y1 * w..(y1 + 1) * w]);
            for &(x0, x1, fx) in &tx {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    Tensor::new(vec![ch, out_h, out_w], out).expect("shape computed from inputs")
}

/// Training-time augmentation switches. Every random draw is skipped when its
/// switch is off, so a disabled policy consumes no randomness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augmentation {
    pub hflip: bool,
    pub vflip: bool,
    pub rotate90: bool,
    /// Side of the random square crop as a fraction of the image side; 1
    /// disables cropping.
    pub crop_fraction: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation { hflip: false, vflip: false, rotate90: false, crop_fraction: 1.0 }
    }
}

impl Augmentation {
    pub fn is_identity(&self) -> bool {
        !self.hflip && !self.vflip && !self.rotate90 && self.crop_fraction >= 1.0
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(DataError::Parameter(format!("crop fraction {} outside (0, 1]", self.crop_fraction)));
        }
        Ok(())
    }
}

/// Resize target, per-channel normalization statistics (in 0–1 pixel units)
/// and augmentation switches for one image branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessPolicy {
    pub target_side: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub augmentation: Augmentation,
}

impl Default for PreprocessPolicy {
    fn default() -> Self {
        PreprocessPolicy { target_side: 224, mean: [0.5; 3], std: [0.5; 3], augmentation: Augmentation::default() }
    }
}

impl PreprocessPolicy {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.target_side == 0 {
            return Err(DataError::Parameter("target side must be positive".into()));
        }
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(DataError::Parameter(format!("bad channel statistics {:?} / {:?}", self.mean, self.std)));
        }
        self.augmentation.validate()
    }

    /// Channel statistics of `images` after resizing to `target_side`.
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a RgbImage>, target_side: usize) -> Result<Self, DataError> {
        let (mut sum, mut sq, mut n) = ([0.0f64; 3], [0.0f64; 3], 0usize);
        for img in images {
            let t = resize_bilinear(&img.to_tensor(), target_side, target_side);
            let plane = target_side * target_side;
            for c in 0..3 {
                for v in &t.data()[c * plane..(c + 1) * plane] {
                    let v = v / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            n += plane;
        }
        if n == 0 {
            return Err(DataError::Parameter("cannot fit normalization on zero images".into()));
        }
        let mut policy = PreprocessPolicy { target_side, ..PreprocessPolicy::default() };
        for c in 0..3 {
            let mean = sum[c] / n as f64;
            let var = (sq[c] / n as f64 - mean * mean).max(0.0);
            policy.mean[c] = mean;
            policy.std[c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(policy)
    }
}

/// `(v/255 − mean_c)/std_c` for a `3×H×W` tensor of 0–255 values.
pub fn z_normalize(t: &Tensor, policy: &PreprocessPolicy) -> Tensor {
    let plane = t.shape()[1] * t.shape()[2];
    let mut out = t.clone();
    for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let (m, s) = (policy.mean[c], policy.std[c]);
        for v in chunk {
            *v = (*v / 255.0 - m) / s;
        }
    }
    out
}

/// Resize to the policy's square side, then normalize.
pub fn preprocess(img: &RgbImage, policy: &PreprocessPolicy) -> Tensor {
    let side = policy.target_side;
    z_normalize(&resize_bilinear(&img.to_tensor(), side, side), policy)
}

fn flip_h(t: &Tensor) -> Tensor {
    let w = t.shape()[2];
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

fn flip_v(t: &Tensor) -> Tensor {
    let (ch, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = t.clone();
    for c in 0..ch {
        for y in 0..h {
            let src = &t.data()[(c * h + h - 1 - y) * w..][..w];
            out.data_mut()[(c * h + y) * w..][..w].copy_from_slice(src);
        }
    }
    out
}

/// Clockwise rotation by `quarter_turns · 90°` of a square image.
fn rotate(t: &Tensor, quarter_turns: usize) -> Tensor {
    let (ch, n) = (t.shape()[0], t.shape()[1]);
    let mut out = t.clone();
    for _ in 0..quarter_turns % 4 {
        let src = out.clone();
        for c in 0..ch {
            for y in 0..n {
                for x in 0..n {
                    out.data_mut()[(c * n + y) * n + x] = src.data()[(c * n + (n - 1 - x)) * n + y];
                }
            }
        }
    }
    out
}

fn crop(t: &Tensor, y0: usize, x0: usize, h: usize, w: usize) -> Tensor {
    let (ch, sh, sw) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = Vec::with_capacity(ch * h * w);
    for c in 0..ch {
        for y in y0..y0 + h {
            out.extend_from_slice(&t.data()[(c * sh + y) * sw + x0..][..w]);
        }
    }
    Tensor::new(vec![ch, h, w], out).expect("crop inside source")
}

/// Coin-flip horizontal and vertical flips, a uniform quarter-turn rotation
/// and a random square crop resized back to the input size, in that order.
pub fn augment(t: &Tensor, a: &Augmentation, rng: &mut Rng) -> Result<Tensor, DataError> {
    a.validate()?;
    let &[_, h, w] = t.shape() else {
        return Err(DataError::Parameter(format!("augment expects C×H×W, got {:?}", t.shape())));
    };
    let mut out = t.clone();
    if a.hflip && rng.random_bool(0.5) {
        out = flip_h(&out);
    }
    if a.vflip && rng.random_bool(0.5) {
        out = flip_v(&out);
    }
    if a.rotate90 {
        if h != w {
            return Err(DataError::Parameter(format!("rotation needs a square image, got {h}x{w}")));
        }
        out = rotate(&out, rng.random_range(0..4));
    }
    if a.crop_fraction < 1.0 {
        let ch = ((h as f64 * a.crop_fraction).round() as usize).clamp(1, h);
        let cw = ((w as f64 * a.crop_fraction).round() as usize).clamp(1, w);
        let y0 = rng.random_range(0..=h - ch);
        let x0 = rng.random_range(0..=w - cw);
        out = resize_bilinear(&crop(&out, y0, x0, ch, cw), h, w);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    #[test]
    fn rotation_moves_the_top_left_to_the_top_right() {
        let t = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(rotate(&t, 1).data(), &[3.0, 1.0, 4.0, 2.0]);
        assert_eq!(rotate(&t, 4).data(), t.data());
    }

    #[test]
    fn flips_are_involutions() {
        let mut rng = seeded_rng(1);
        let t = Tensor::new(vec![3, 4, 5], (0..60).map(|_| rng.random::<f64>()).collect()).unwrap();
        assert_eq!(flip_h(&flip_h(&t)), t);
        assert_eq!(flip_v(&flip_v(&t)), t);
        assert_ne!(flip_h(&t), t);
    }
}
