#![allow(dead_code)]

use std::path::Path;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ucapsnet::colourspace::RgbImage;
use ucapsnet::gamut::GamutPalette;
use ucapsnet::training::{prepare_sample, Sample, TrainConfig};

pub fn palette() -> GamutPalette {
    static P: OnceLock<GamutPalette> = OnceLock::new();
    P.get_or_init(|| GamutPalette::build(10.0).unwrap()).clone()
}

/// Flat background with four coloured discs.
pub fn toy_image(seed: u64, side: usize) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg: [u8; 3] = rng.random();
    let discs: Vec<(f32, f32, f32, [u8; 3])> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.0..side as f32),
                rng.random_range(0.0..side as f32),
                rng.random_range(6.0..side as f32 / 3.0),
                rng.random(),
            )
        })
        .collect();
    RgbImage::from_fn(side, side, |x, y| {
        let mut c = bg;
        for &(cx, cy, r, col) in &discs {
            if (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2) < r * r {
                c = col;
            }
        }
        c
    })
}

pub fn toy_samples(n: u64, side: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| prepare_sample(format!("toy-{i}.png").into(), &toy_image(i, side), side).unwrap())
        .collect()
}

/// Writes `n` toy PNGs plus a manifest listing them.
pub fn write_toy_set(dir: &Path, n: u64, side: usize) -> std::path::PathBuf {
    let mut listing = String::new();
    for i in 0..n {
        let name = format!("toy-{i}.png");
        toy_image(i, side).save(&dir.join(&name)).unwrap();
        listing.push_str(&name);
        listing.push('\n');
    }
    let manifest = dir.join("train.txt");
    std::fs::write(&manifest, listing).unwrap();
    manifest
}

pub fn small_config(extra: &str) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.apply_text(
        "variant=q\ninput_side=32\nbase_channels=4\nbatch_size=4\nepochs=1000\nlearning_rate=1e-3\ndeterministic=true\nd_widths=2,4,6,8\n",
    )
    .unwrap();
    cfg.apply_text(extra).unwrap();
    cfg.validate().unwrap();
    cfg
}
