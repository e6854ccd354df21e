//! Seeded procedural scenes: overlapping flat-coloured discs and rectangles
//! over a smooth gradient, with a faint stripe texture. Sharp edges and
//! texture give a super-resolver something to learn where real data is
//! unavailable.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::io::save_png;
use crate::error::Result;
use crate::Image;

pub fn synthetic_scene(seed: u64, height: usize, width: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g0: [f64; 3] = rng.gen();
    let g1: [f64; 3] = rng.gen();
    let (fh, fw) = (height as f64, width as f64);
    let mut img = Array3::from_shape_fn((3, height, width), |(c, y, x)| {
        let t = 0.5 * (y as f64 / fh + x as f64 / fw);
        0.2 + 0.6 * (g0[c] * (1.0 - t) + g1[c] * t)
    });
    let shapes = rng.gen_range(4..9);
    for _ in 0..shapes {
        let colour: [f64; 3] = rng.gen();
        let cy = rng.gen_range(0.0..fh);
        let cx = rng.gen_range(0.0..fw);
        let r = rng.gen_range(0.08..0.3) * fh.min(fw);
        let disc = rng.gen_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let inside = if disc {
                    dy * dy + dx * dx <= r * r
                } else {
                    dy.abs() <= r && dx.abs() <= 0.6 * r
                };
                if inside {
                    for c in 0..3 {
                        img[[c, y, x]] = colour[c];
                    }
                }
            }
        }
    }
    let period = rng.gen_range(3.0..7.0);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let (s, c) = angle.sin_cos();
    img.indexed_iter_mut().for_each(|((_, y, x), v)| {
        let phase = (y as f64 * s + x as f64 * c) * std::f64::consts::TAU / period;
        *v = (*v + 0.06 * phase.sin()).clamp(0.0, 1.0);
    });
    img
}

/// Writes `count` scenes as `root/{split}/HR/scene_{i:03}.png`; LR images
/// are synthesized by the manifest on first use.
pub fn write_synthetic_split(
    root: &Path,
    split: &str,
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<()> {
    let dir = root.join(split).join("HR");
    for i in 0..count {
        let img = synthetic_scene(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), height, width);
        save_png(&img, &dir.join(format!("scene_{i:03}.png")))?;
    }
    Ok(())
}
