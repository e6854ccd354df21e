//! Bicubic resampling.
//!
//! Kernel (a = −0.5):
//!
//! ```text
//! k(x) = 1.5|x|³ − 2.5|x|² + 1            |x| ≤ 1
//!      = −0.5|x|³ + 2.5|x|² − 4|x| + 2    1 < |x| ≤ 2
//!      = 0                                otherwise
//! ```
//!
//! Output sample `o` sits at input coordinate `u = (o + 0.5)/r − 0.5`
//! (`r = out/in`). When shrinking (`r < 1`) the kernel is stretched to
//! `r·k(r·x)` with support `4/r`, which antialiases. Taps are
//! `floor(u − support/2) + p` for `p = 0..ceil(support) + 2`, weights are
//! normalised to sum to one, and out-of-range taps fold back symmetrically
//! (`−1 → 0`, `n → n − 1`). The image is resampled along rows first, then
//! columns.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::Image;

pub fn cubic(x: f64) -> f64 {
    let a = x.abs();
    let a2 = a * a;
    let a3 = a2 * a;
    if a <= 1.0 {
        1.5 * a3 - 2.5 * a2 + 1.0
    } else if a <= 2.0 {
        -0.5 * a3 + 2.5 * a2 - 4.0 * a + 2.0
    } else {
        0.0
    }
}

/// Symmetric fold of an arbitrary integer index into `0..n`.
pub fn symmetric_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Per-output tap indices and normalised weights along one axis.
#[derive(Clone, Debug)]
pub struct ResampleTable {
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl ResampleTable {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        let r = out_len as f64 / in_len as f64;
        let (stretch, support) = if r < 1.0 { (r, 4.0 / r) } else { (1.0, 4.0) };
        let count = support.ceil() as isize + 2;
        let taps = (0..out_len)
            .map(|o| {
                let u = (o as f64 + 0.5) / r - 0.5;
                let left = (u - support / 2.0).floor() as isize;
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(count as usize);
                let mut total = 0.0;
                for p in 0..count {
                    let j = left + p;
                    let w = stretch * cubic(stretch * (u - j as f64));
                    if w != 0.0 {
                        row.push((symmetric_index(j, in_len), w));
                        total += w;
                    }
                }
                for t in row.iter_mut() {
                    t.1 /= total;
                }
                row
            })
            .collect();
        ResampleTable { taps }
    }
}

fn resample_plane(plane: &Array2<f64>, rows: &ResampleTable, cols: &ResampleTable) -> Array2<f64> {
    let (h, _) = plane.dim();
    let out_w = cols.taps.len();
    let mut tmp = Array2::<f64>::zeros((h, out_w));
    for y in 0..h {
        let src = plane.row(y);
        for (x, taps) in cols.taps.iter().enumerate() {
            tmp[[y, x]] = taps.iter().map(|&(j, w)| w * src[j]).sum();
        }
    }
    let out_h = rows.taps.len();
    let mut out = Array2::<f64>::zeros((out_h, out_w));
    for (y, taps) in rows.taps.iter().enumerate() {
        let mut dst = out.row_mut(y);
        for &(i, w) in taps {
            dst.scaled_add(w, &tmp.row(i));
        }
    }
    out
}

/// Bicubic resize of every channel to `out_h × out_w`. No clamping.
pub fn bicubic_resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    let (c, h, w) = img.dim();
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("output size must be at least 1x1"));
    }
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("cannot resize an empty image"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let rows = ResampleTable::new(h, out_h);
    let cols = ResampleTable::new(w, out_w);
    let mut out = Array3::<f64>::zeros((c, out_h, out_w));
    for ch in 0..c {
        let plane = img.index_axis(ndarray::Axis(0), ch).to_owned();
        out.index_axis_mut(ndarray::Axis(0), ch)
            .assign(&resample_plane(&plane, &rows, &cols));
    }
    Ok(out)
}

/// Bilinear resize with half-pixel centres and edge clamping, matching the
/// residual path of the network.
pub fn bilinear_resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    let (c, h, w) = img.dim();
    if out_h == 0 || out_w == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("bilinear resize needs non-empty sizes"));
    }
    let t = crate::nn::kernels::upsample_bilinear(&crate::blocks::to_tensor(img), out_h, out_w);
    Ok(crate::blocks::to_array3(t))
}
