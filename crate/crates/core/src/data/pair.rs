use ndarray::{s, Array3, Axis};
use rand::Rng;

use super::resize::bicubic_resize;
use crate::error::{Error, Result};
use crate::Image;

/// An aligned training or benchmark pair: `hr` is exactly `scale×` `lr`.
#[derive(Clone, Debug, PartialEq)]
pub struct SrPair {
    pub hr: Image,
    pub lr: Image,
    pub scale: usize,
}

impl SrPair {
    pub fn new(hr: Image, lr: Image, scale: usize) -> Result<Self> {
        let (hc, hh, hw) = hr.dim();
        let (lc, lh, lw) = lr.dim();
        if scale == 0 || hc != lc || hh != lh * scale || hw != lw * scale {
            return Err(Error::invalid(format!(
                "HR {hc}x{hh}x{hw} is not {scale}x LR {lc}x{lh}x{lw}"
            )));
        }
        Ok(SrPair { hr, lr, scale })
    }
}

/// Centre crop of `img` to dimensions divisible by `scale`.
pub fn crop_to_multiple(img: &Image, scale: usize) -> Result<Image> {
    let (_, h, w) = img.dim();
    if scale == 0 || h < scale || w < scale {
        return Err(Error::invalid(format!(
            "image {h}x{w} is smaller than one {scale}x{scale} cell"
        )));
    }
    let (nh, nw) = (h - h % scale, w - w % scale);
    let (top, left) = ((h - nh) / 2, (w - nw) / 2);
    Ok(img.slice(s![.., top..top + nh, left..left + nw]).to_owned())
}

/// Crops HR to a multiple of `scale` and synthesizes LR by bicubic
/// downscaling.
pub fn make_pair(hr: &Image, scale: usize) -> Result<SrPair> {
    let hr = crop_to_multiple(hr, scale)?;
    let (_, h, w) = hr.dim();
    let lr = bicubic_resize(&hr, h / scale, w / scale)?;
    Ok(SrPair { hr, lr, scale })
}

/// Uniform top-left LR offset of a `patch × patch` window.
pub fn patch_offsets<R: Rng>(lr_h: usize, lr_w: usize, patch: usize, rng: &mut R) -> Result<(usize, usize)> {
    if patch == 0 || patch > lr_h || patch > lr_w {
        return Err(Error::invalid(format!(
            "patch {patch} does not fit in a {lr_h}x{lr_w} image"
        )));
    }
    Ok((rng.gen_range(0..=lr_h - patch), rng.gen_range(0..=lr_w - patch)))
}

/// The aligned crop at LR offset `(top, left)`; HR offset is `scale×` it.
pub fn crop_pair(pair: &SrPair, top: usize, left: usize, patch: usize) -> SrPair {
    let s = pair.scale;
    SrPair {
        lr: pair.lr.slice(s![.., top..top + patch, left..left + patch]).to_owned(),
        hr: pair
            .hr
            .slice(s![.., top * s..(top + patch) * s, left * s..(left + patch) * s])
            .to_owned(),
        scale: s,
    }
}

pub fn sample_patch<R: Rng>(pair: &SrPair, patch_lr: usize, rng: &mut R) -> Result<SrPair> {
    let (_, h, w) = pair.lr.dim();
    let (top, left) = patch_offsets(h, w, patch_lr, rng)?;
    Ok(crop_pair(pair, top, left, patch_lr))
}

/// Horizontal flip followed by `rotations` counter-clockwise quarter turns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augmentation {
    pub flip: bool,
    pub rotations: u8,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        flip: false,
        rotations: 0,
    };

    /// Flip with probability 0.5; rotation `k·90°`, `k` uniform in 0..4.
    pub fn draw<R: Rng>(rng: &mut R) -> Self {
        let flip = rng.gen_bool(0.5);
        let rotations = rng.gen_range(0..4u8);
        Augmentation { flip, rotations }
    }

    pub fn apply(&self, img: &Image) -> Image {
        let mut v = img.view();
        if self.flip {
            v.invert_axis(Axis(2));
        }
        for _ in 0..self.rotations % 4 {
            // Counter-clockwise quarter turn: transpose, then flip rows.
            v.swap_axes(1, 2);
            v.invert_axis(Axis(1));
        }
        let mut out = Array3::zeros(v.dim());
        out.assign(&v);
        out
    }

    pub fn apply_pair(&self, pair: &SrPair) -> SrPair {
        SrPair {
            hr: self.apply(&pair.hr),
            lr: self.apply(&pair.lr),
            scale: pair.scale,
        }
    }
}

pub fn augment<R: Rng>(pair: &SrPair, rng: &mut R) -> SrPair {
    Augmentation::draw(rng).apply_pair(pair)
}
