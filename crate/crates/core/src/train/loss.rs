//! Reconstruction losses with their gradients with respect to the
//! prediction.
//!
//! The frequency loss works on unnormalised per-channel 2-D DFT
//! coefficients of `pred − gt`. The complex form averages `|Re|` and `|Im|`
//! over all `2·C·H·W` real numbers; the amplitude form averages
//! `||F(pred)| − |F(gt)||` over `C·H·W` coefficients.

use ndarray::{Array3, Axis};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Image;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FftLossKind {
    #[default]
    Complex,
    Amplitude,
}

fn check_same(pred: &Image, gt: &Image) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::invalid(format!(
            "loss inputs differ in shape: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("loss inputs are empty"));
    }
    Ok(())
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute error.
pub fn loss_l1(pred: &Image, gt: &Image) -> Result<f64> {
    Ok(l1_with_grad(pred, gt)?.0)
}

pub fn l1_with_grad(pred: &Image, gt: &Image) -> Result<(f64, Image)> {
    check_same(pred, gt)?;
    let n = pred.len() as f64;
    let diff = pred - gt;
    let value = diff.iter().map(|d| d.abs()).sum::<f64>() / n;
    Ok((value, diff.mapv(|d| sign(d) / n)))
}

/// Unnormalised 2-D DFT (or inverse DFT) of one `h×w` plane, row-major.
pub fn dft2(plane: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    row.process(plane);
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = plane[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            plane[y * w + x] = column[y];
        }
    }
}

fn spectra(img: &Image) -> Vec<Vec<Complex64>> {
    let (_, h, w) = img.dim();
    img.axis_iter(Axis(0))
        .map(|p| {
            let mut buf: Vec<Complex64> = p.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            dft2(&mut buf, h, w, false);
            buf
        })
        .collect()
}

fn real_inverse(coeffs: Vec<Vec<Complex64>>, h: usize, w: usize, scale: f64) -> Image {
    let c = coeffs.len();
    let mut out = Array3::<f64>::zeros((c, h, w));
    for (ch, mut buf) in coeffs.into_iter().enumerate() {
        dft2(&mut buf, h, w, true);
        for (o, v) in out.index_axis_mut(Axis(0), ch).iter_mut().zip(buf) {
            *o = v.re * scale;
        }
    }
    out
}

pub fn loss_fft(pred: &Image, gt: &Image) -> Result<f64> {
    Ok(fft_with_grad(pred, gt, FftLossKind::Complex)?.0)
}

pub fn fft_with_grad(pred: &Image, gt: &Image, kind: FftLossKind) -> Result<(f64, Image)> {
    check_same(pred, gt)?;
    let (_, h, w) = pred.dim();
    let n = pred.len() as f64;
    match kind {
        FftLossKind::Complex => {
            let d = spectra(&(pred - gt));
            let mut total = 0.0;
            let signs: Vec<Vec<Complex64>> = d
                .iter()
                .map(|plane| {
                    plane
                        .iter()
                        .map(|z| {
                            total += z.re.abs() + z.im.abs();
                            Complex64::new(sign(z.re), sign(z.im))
                        })
                        .collect()
                })
                .collect();
            // ∂Re D_k/∂x_n = cos θ, ∂Im D_k/∂x_n = −sin θ, θ = 2πkn/N, so
            // the gradient is Re(IDFT(sign Re + i·sign Im)) / 2N.
            let grad = real_inverse(signs, h, w, 1.0 / (2.0 * n));
            Ok((total / (2.0 * n), grad))
        }
        FftLossKind::Amplitude => {
            let p = spectra(pred);
            let g = spectra(gt);
            let mut total = 0.0;
            let dirs: Vec<Vec<Complex64>> = p
                .iter()
                .zip(&g)
                .map(|(pp, gp)| {
                    pp.iter()
                        .zip(gp)
                        .map(|(a, b)| {
                            let (ma, mb) = (a.norm(), b.norm());
                            total += (ma - mb).abs();
                            if ma == 0.0 {
                                Complex64::new(0.0, 0.0)
                            } else {
                                a * (sign(ma - mb) / ma)
                            }
                        })
                        .collect()
                })
                .collect();
            let grad = real_inverse(dirs, h, w, 1.0 / n);
            Ok((total / n, grad))
        }
    }
}

/// `L1 + lambda_f · L_fft` and its components.
#[derive(Clone, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub l1: f64,
    pub fft: f64,
}

pub fn total_loss(pred: &Image, gt: &Image, lambda_f: f64) -> Result<f64> {
    Ok(total_loss_with_grad(pred, gt, lambda_f, FftLossKind::Complex)?.0.total)
}

pub fn total_loss_with_grad(
    pred: &Image,
    gt: &Image,
    lambda_f: f64,
    kind: FftLossKind,
) -> Result<(LossParts, Image)> {
    if lambda_f.is_nan() || lambda_f < 0.0 {
        return Err(Error::invalid(format!("lambda_f must be >= 0, got {lambda_f}")));
    }
    let (l1, mut grad) = l1_with_grad(pred, gt)?;
    let fft = if lambda_f > 0.0 {
        let (f, g) = fft_with_grad(pred, gt, kind)?;
        grad.scaled_add(lambda_f, &g);
        f
    } else {
        fft_with_grad(pred, gt, kind)?.0
    };
    Ok((
        LossParts {
            total: l1 + lambda_f * fft,
            l1,
            fft,
        },
        grad,
    ))
}
