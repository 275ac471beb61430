//! Generates a synthetic corpus, trains the desk-scale model on it and
//! prints per-epoch statistics.
//!
//! `cargo run --release --example desk_train -- <corpus-dir> [epochs] [lr] [fused|satellite_only] [complementary]`
//!
//! The learning rate defaults to 1e-3 here, ten times the library default,
//! which suits the small desk model.

use std::time::Instant;

use geoecon::align::PairOptions;
use geoecon::dataio::{synth_corpus, CorpusLayout, SynthConfig};
use geoecon::dataset::{align_period, fit_policies, load_pair_images, load_period, to_samples};
use geoecon::model::{train, FusionModel, Modality, ModelConfig, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let root = std::path::PathBuf::from(args.get(1).map(String::as_str).unwrap_or("/tmp/desk-corpus"));
    let epochs: usize = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(40);
    let lr: f64 = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(1e-3);
    let modality = match args.get(4).map(String::as_str) {
        Some("satellite_only") => Modality::SatelliteOnly,
        _ => Modality::Fused,
    };
    let complementary = args.get(5).is_some_and(|s| s == "complementary");

    let t0 = Instant::now();
    let layout = CorpusLayout::new(&root);
    if !layout.summary().exists() {
        synth_corpus(&SynthConfig { seed: 7, complementary, ..SynthConfig::default() }, &root)?;
    }
    println!("corpus ready in {:.1?}", t0.elapsed());

    let inputs = load_period(&layout, "2023")?;
    let outcome = align_period(&inputs, &PairOptions::default())?;
    let images = load_pair_images(&layout, &inputs, &outcome.pairs)?;
    let cfg = ModelConfig { modality, ..ModelConfig::desk() };
    let policies = fit_policies(&images, cfg.image_side)?;
    let samples = to_samples(&images, &policies);
    println!("{} samples in {:.1?}", samples.len(), t0.elapsed());

    let mut model = FusionModel::new(cfg, 7)?;
    let tc = TrainConfig {
        epochs,
        batch_size: 32,
        adam: geoecon::numerics::AdamConfig { lr, ..Default::default() },
        seed: 7,
        ..TrainConfig::default()
    };
    let t1 = Instant::now();
    train(&mut model, &samples, &tc, |s| {
        println!(
            "epoch {:>2} train_mse {:.4} val_mse {:.4} val_r2 {:.4} [{:.1?}]",
            s.epoch,
            s.train_mse,
            s.val_mse.unwrap_or(f64::NAN),
            s.val_r2.unwrap_or(f64::NAN),
            t1.elapsed()
        )
    })?;
    Ok(())
}
