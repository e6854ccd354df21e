//! Luminance PSNR and SSIM.

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};
use crate::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Studio-swing BT.601 luma, `(65.481R + 128.553G + 24.966B + 16)/255`.
/// A single-channel input is taken to be luma already.
pub fn rgb_to_y(img: &Image) -> Result<Array2<f64>> {
    match img.dim().0 {
        3 => {
            let (r, g, b) = (
                img.index_axis(Axis(0), 0),
                img.index_axis(Axis(0), 1),
                img.index_axis(Axis(0), 2),
            );
            let mut y = Array2::<f64>::zeros(r.dim());
            ndarray::Zip::from(&mut y).and(&r).and(&g).and(&b).for_each(|y, &r, &g, &b| {
                *y = (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0;
            });
            Ok(y)
        }
        1 => Ok(img.index_axis(Axis(0), 0).to_owned()),
        c => Err(Error::invalid(format!("expected 1 or 3 channels, got {c}"))),
    }
}

fn shaved_pair(pred: &Image, gt: &Image, shave: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    if pred.dim() != gt.dim() {
        return Err(Error::invalid(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let (_, h, w) = pred.dim();
    if h <= 2 * shave || w <= 2 * shave {
        return Err(Error::invalid(format!(
            "image {h}x{w} is too small to shave {shave} pixels"
        )));
    }
    let crop = |p: Array2<f64>| p.slice(s![shave..h - shave, shave..w - shave]).to_owned();
    Ok((crop(rgb_to_y(pred)?), crop(rgb_to_y(gt)?)))
}

/// `10·log10(1/MSE)` on the shaved luma planes; `+∞` when identical.
pub fn psnr_y(pred: &Image, gt: &Image, shave: usize) -> Result<f64> {
    let (a, b) = shaved_pair(pred, gt, shave)?;
    let mse = (&a - &b).mapv(|d| d * d).mean().unwrap_or(0.0);
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

pub fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Separable valid-mode filtering with the normalised Gaussian.
fn filter_valid(p: &Array2<f64>, g: &[f64]) -> Array2<f64> {
    let (h, w) = p.dim();
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            tmp[[y, x]] = (0..k).map(|i| g[i] * p[[y, x + i]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for i in 0..k {
            let row = tmp.row(y + i);
            out.row_mut(y).scaled_add(g[i], &row);
        }
    }
    out
}

/// Mean single-scale SSIM over valid 11×11 windows of the shaved luma.
pub fn ssim_y(pred: &Image, gt: &Image, shave: usize) -> Result<f64> {
    let (_, h, w) = pred.dim();
    if pred.dim() == gt.dim() && (h < 2 * shave + SSIM_WINDOW || w < 2 * shave + SSIM_WINDOW) {
        return Err(Error::invalid(format!(
            "image {h}x{w} minus shave {shave} is below the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let (a, b) = shaved_pair(pred, gt, shave)?;
    let g = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mu_a = filter_valid(&a, &g);
    let mu_b = filter_valid(&b, &g);
    let aa = filter_valid(&(&a * &a), &g);
    let bb = filter_valid(&(&b * &b), &g);
    let ab = filter_valid(&(&a * &b), &g);
    let mut total = 0.0;
    ndarray::Zip::from(&mu_a)
        .and(&mu_b)
        .and(&aa)
        .and(&bb)
        .and(&ab)
        .for_each(|&ma, &mb, &aa, &bb, &ab| {
            let va = aa - ma * ma;
            let vb = bb - mb * mb;
            let cov = ab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        });
    Ok(total / mu_a.len() as f64)
}
