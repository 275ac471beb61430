use std::collections::BTreeMap;
use std::path::Path;

use geoecon::align::PairOptions;
use geoecon::dataio::{
    augment, decode_image, decode_png_bytes, encode_png, load_nightlight_raster, parse_nlr, preprocess,
    read_counties, resize_bilinear, save_nightlight_raster, synth_corpus, z_normalize, Augmentation, CorpusLayout,
    DataError, PreprocessPolicy, RgbImage, SynthConfig,
};
use geoecon::dataset::{align_period, fit_policies, load_pair_images, load_period};
use geoecon::geo::{raster_cell_index, NightlightRaster, RasterMeta};
use geoecon::model::{pearson, r_squared};
use geoecon::numerics::{seeded_rng, Tensor};
use rand::Rng as _;

fn random_image(seed: u64, w: usize, h: usize) -> RgbImage {
    let mut rng = seeded_rng(seed);
    RgbImage::new(w, h, (0..3 * w * h).map(|_| rng.random()).collect()).unwrap()
}

#[test]
fn white_pixel_decodes_to_255() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("white.png");
    image::RgbImage::from_pixel(1, 1, image::Rgb([255, 255, 255])).save(&path).unwrap();
    let img = decode_image(&path).unwrap();
    assert_eq!((img.width(), img.height()), (1, 1));
    assert_eq!(img.data(), &[255, 255, 255]);
}

#[test]
fn alpha_is_dropped_and_channels_are_planar() {
    let mut rgba = image::RgbaImage::new(2, 1);
    rgba.put_pixel(0, 0, image::Rgba([10, 20, 30, 0]));
    rgba.put_pixel(1, 0, image::Rgba([40, 50, 60, 255]));
    let mut bytes = std::io::Cursor::new(Vec::new());
    rgba.write_to(&mut bytes, image::ImageFormat::Png).unwrap();
    let img = decode_png_bytes(bytes.get_ref()).unwrap();
    assert_eq!(img.data(), &[10, 40, 20, 50, 30, 60]);
}

#[test]
fn png_round_trip_is_lossless() {
    let img = random_image(3, 37, 21);
    assert_eq!(decode_png_bytes(&encode_png(&img)).unwrap(), img);
}

#[test]
fn truncated_png_is_a_decode_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.png");
    let bytes = encode_png(&random_image(4, 16, 16));
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    match decode_image(&path) {
        Err(DataError::Decode { path: p, .. }) => assert_eq!(p, path),
        other => panic!("expected a decode error, got {other:?}"),
    }
    assert!(matches!(decode_image(&dir.path().join("missing.png")), Err(DataError::Io { .. })));
}

#[test]
fn resize_examples() {
    let img = random_image(5, 24, 24).to_tensor();
    let same = resize_bilinear(&img, 24, 24);
    assert!(same.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() <= 1e-6));

    let flat = RgbImage::filled(30, 17, [9, 80, 200]).to_tensor();
    let r = resize_bilinear(&flat, 11, 45);
    assert_eq!(r.shape(), &[3, 11, 45]);
    for (c, v) in [9.0, 80.0, 200.0].iter().enumerate() {
        assert!(r.data()[c * 11 * 45..(c + 1) * 11 * 45].iter().all(|x| x == v));
    }

    let board = Tensor::new(vec![1, 2, 2], vec![0.0, 255.0, 255.0, 0.0]).unwrap();
    let up = resize_bilinear(&board, 4, 4);
    #[rustfmt::skip]
    let expected = [
        0.0, 63.75, 191.25, 255.0,
        63.75, 95.625, 159.375, 191.25,
        191.25, 159.375, 95.625, 63.75,
        255.0, 191.25, 63.75, 0.0,
    ];
    assert_eq!(up.data(), &expected);
}

#[test]
fn z_normalize_examples() {
    let policy = PreprocessPolicy::default();
    let t = Tensor::new(vec![3, 1, 2], vec![255.0, 0.0, 255.0, 0.0, 255.0, 0.0]).unwrap();
    assert_eq!(z_normalize(&t, &policy).data(), &[1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);

    let policy = PreprocessPolicy { mean: [0.2, 0.4, 0.6], std: [0.1, 0.2, 0.3], ..PreprocessPolicy::default() };
    let at_mean = Tensor::new(vec![3, 1, 1], vec![0.2 * 255.0, 0.4 * 255.0, 0.6 * 255.0]).unwrap();
    assert!(z_normalize(&at_mean, &policy).data().iter().all(|v| v.abs() < 1e-12));

    let bad = PreprocessPolicy { std: [0.1, 0.0, 0.3], ..PreprocessPolicy::default() };
    assert!(bad.validate().is_err());
}

#[test]
fn preprocessing_never_produces_nan() {
    let policy = PreprocessPolicy { target_side: 32, ..PreprocessPolicy::default() };
    for seed in 0..10 {
        let t = preprocess(&random_image(seed, 7 + seed as usize, 50), &policy);
        assert_eq!(t.shape(), &[3, 32, 32]);
        assert!(t.all_finite());
    }
}

#[test]
fn augmentation_contracts() {
    let img = z_normalize(&random_image(8, 20, 20).to_tensor(), &PreprocessPolicy::default());
    let off = Augmentation::default();
    assert!(off.is_identity());
    assert_eq!(augment(&img, &off, &mut seeded_rng(1)).unwrap(), img);

    let on = Augmentation { hflip: true, vflip: true, rotate90: true, crop_fraction: 0.75 };
    let a = augment(&img, &on, &mut seeded_rng(2)).unwrap();
    let b = augment(&img, &on, &mut seeded_rng(2)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), img.shape());

    // a horizontal flip on every draw: two applications restore the image
    let flip = Augmentation { hflip: true, ..Augmentation::default() };
    let mut rng = seeded_rng(3);
    let mut flips = 0;
    for _ in 0..20 {
        let once = augment(&img, &flip, &mut rng).unwrap();
        if once != img {
            flips += 1;
            let mut row_reversed = img.clone();
            for row in row_reversed.data_mut().chunks_mut(20) {
                row.reverse();
            }
            assert_eq!(once, row_reversed);
        }
    }
    assert!(flips > 0 && flips < 20);

    let wide = Tensor::zeros(&[3, 4, 6]);
    let rot = Augmentation { rotate90: true, ..Augmentation::default() };
    assert!(augment(&wide, &rot, &mut seeded_rng(1)).is_err());
}

#[test]
fn nlr_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.nlr");
    let mut rng = seeded_rng(9);
    let meta = RasterMeta { origin_lat: 75.00208333335, origin_lon: -180.00208333335, step: RasterMeta::VIIRS_STEP, rows: 13, cols: 17 };
    let mut values: Vec<f32> = (0..13 * 17).map(|_| rng.random_range(-5.0..500.0)).collect();
    values[7] = f32::NAN;
    let raster = NightlightRaster::new(meta, values).unwrap();
    save_nightlight_raster(&path, &raster).unwrap();
    let back = load_nightlight_raster(&path).unwrap();
    assert_eq!(back.meta, raster.meta);
    let bits = |r: &NightlightRaster| r.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&raster));
}

#[test]
fn nlr_header_example_and_errors() {
    let p = Path::new("mem.nlr");
    let mut bytes = b"NLR1 2 2 1.0 0.0 0.5\n".to_vec();
    for v in [1.0f32, 2.0, 3.0, 4.0] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let r = parse_nlr(&bytes, p).unwrap();
    assert_eq!((r.meta.rows, r.meta.cols, r.meta.step), (2, 2, 0.5));
    assert_eq!(r.values, vec![1.0, 2.0, 3.0, 4.0]);

    let short = [b"NLR1 3 2 1.0 0.0 0.5\n".as_slice(), &bytes[21..]].concat();
    assert!(matches!(parse_nlr(&short, p), Err(DataError::Format { .. })));
    let magic = [b"NLR2 2 2 1.0 0.0 0.5\n".as_slice(), &bytes[21..]].concat();
    assert!(matches!(parse_nlr(&magic, p), Err(DataError::Format { .. })));
    let zero_step = [b"NLR1 2 2 1.0 0.0 0\n".as_slice(), &bytes[21..]].concat();
    assert!(matches!(parse_nlr(&zero_step, p), Err(DataError::Format { .. })));
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn same_seed_gives_a_byte_identical_corpus() {
    let cfg = SynthConfig { seed: 7, n_pairs: 12, periods: vec!["2022".into(), "2023".into()], ..SynthConfig::default() };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth_corpus(&cfg, a.path()).unwrap();
    synth_corpus(&cfg, b.path()).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.len(), 3 + 2 * (2 + 1 + 12 + 48));
    assert_eq!(ta, tb);

    let c = tempfile::tempdir().unwrap();
    synth_corpus(&SynthConfig { seed: 8, ..cfg }, c.path()).unwrap();
    assert_ne!(tree(c.path()), ta);
}

#[test]
fn synth_rejects_bad_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let zero = SynthConfig { n_pairs: 0, ..SynthConfig::default() };
    assert!(matches!(synth_corpus(&zero, dir.path()), Err(DataError::Parameter(_))));
    let flat = geoecon::geo::BBox::from_bounds(30.0, 114.0, 30.0, 115.0).unwrap();
    let degenerate = SynthConfig { region: Some(flat), ..SynthConfig::default() };
    assert!(matches!(synth_corpus(&degenerate, dir.path()), Err(DataError::Parameter(_))));
    let small = geoecon::geo::BBox::from_bounds(30.0, 114.0, 30.2, 114.2).unwrap();
    let crowded = SynthConfig { region: Some(small), n_pairs: 100, ..SynthConfig::default() };
    assert!(matches!(synth_corpus(&crowded, dir.path()), Err(DataError::Parameter(_))));
}

/// Closed-form simple regression of labels on mean satellite brightness.
fn brightness_fit(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    x.iter().map(|a| my + slope * (a - mx)).collect()
}

#[test]
fn generated_corpus_is_learnable_and_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let summary = synth_corpus(&SynthConfig { seed: 7, ..SynthConfig::default() }, dir.path()).unwrap();
    let layout = CorpusLayout::new(dir.path());
    let inputs = load_period(&layout, "2023").unwrap();
    assert_eq!(inputs.satellites.len(), 512);
    assert_eq!(inputs.streetviews.len(), 2048);
    for s in &inputs.satellites {
        raster_cell_index(&summary.raster, &s.location).expect("raster covers every satellite centre");
    }
    let counties = read_counties(&layout.counties()).unwrap();
    assert_eq!(counties.len(), 9);

    let outcome = align_period(&inputs, &PairOptions::default()).unwrap();
    assert_eq!(outcome.pairs.len(), 512);
    assert!(outcome.pairs.iter().all(|p| p.label.is_finite() && p.distance_km < 1.0));

    let images = load_pair_images(&layout, &inputs, &outcome.pairs).unwrap();
    let brightness: Vec<f64> =
        images.iter().map(|p| p.sat.data().iter().map(|&v| v as f64).sum::<f64>() / p.sat.data().len() as f64).collect();
    let labels: Vec<f64> = outcome.pairs.iter().map(|p| p.label).collect();
    let fit = brightness_fit(&brightness, &labels);
    let r2 = r_squared(&fit, &labels).unwrap();
    assert!(r2 >= 0.9, "linear brightness oracle R² {r2}");
    assert!(pearson(&brightness, &labels).unwrap() >= 0.9);

    // normalized with corpus statistics, each channel is close to standard
    let policies = fit_policies(&images, 64).unwrap();
    for (branch, policy) in [("sat", &policies.sat), ("sv", &policies.sv)] {
        let (mut sum, mut sq, mut n) = ([0.0; 3], [0.0; 3], 0.0);
        for p in &images {
            let t = preprocess(if branch == "sat" { &p.sat } else { &p.sv }, policy);
            for (c, chunk) in t.data().chunks(64 * 64).enumerate() {
                sum[c] += chunk.iter().sum::<f64>();
                sq[c] += chunk.iter().map(|v| v * v).sum::<f64>();
            }
            n += 64.0 * 64.0;
        }
        for c in 0..3 {
            let mean = sum[c] / n;
            let var = sq[c] / n - mean * mean;
            assert!(mean.abs() <= 0.05 && (var - 1.0).abs() <= 0.1, "{branch} channel {c}: {mean} {var}");
        }
    }
}
