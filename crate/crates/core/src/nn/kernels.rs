//! Forward and adjoint kernels shared by the eager evaluator and the tape.
//!
//! Every feature tensor is channel-major `C×H×W` in standard layout. Kernels
//! assume shapes were validated by the caller.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, IxDyn};

use super::Tensor;

pub(crate) fn dims3(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    debug_assert_eq!(s.len(), 3, "expected a C×H×W tensor, got {s:?}");
    (s[0], s[1], s[2])
}

pub(crate) fn slice(t: &Tensor) -> &[f64] {
    t.as_slice().expect("tensor must be contiguous")
}

pub(crate) fn slice_mut(t: &mut Tensor) -> &mut [f64] {
    t.as_slice_mut().expect("tensor must be contiguous")
}

fn mat(t: &Tensor, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), slice(t)).expect("matrix view")
}

fn mat_mut(t: &mut Tensor, rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), slice_mut(t)).expect("matrix view")
}

pub(crate) fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(IxDyn(shape))
}

/// Unfolds zero-padded `k×k` neighbourhoods into a `(C·k·k) × (H·W)` matrix.
fn im2col(x: &Tensor, k: usize) -> Array2<f64> {
    let (c, h, w) = dims3(x);
    let p = (k / 2) as isize;
    let xs = slice(x);
    let mut cols = Array2::<f64>::zeros((c * k * k, h * w));
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cs[row * h * w..(row + 1) * h * w];
                let dy = ky as isize - p;
                let dx = kx as isize - p;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &xs[(ci * h + sy as usize) * w..(ci * h + sy as usize + 1) * w];
                    let (x0, x1) = valid_range(w, dx);
                    for xx in x0..x1 {
                        dst[y * w + xx] = src_row[(xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, c: usize, h: usize, w: usize, k: usize) -> Tensor {
    let p = (k / 2) as isize;
    let mut out = zeros(&[c, h, w]);
    let os = slice_mut(&mut out);
    let cs = cols.as_slice().unwrap();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cs[row * h * w..(row + 1) * h * w];
                let dy = ky as isize - p;
                let dx = kx as isize - p;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + sy as usize) * w;
                    let (x0, x1) = valid_range(w, dx);
                    for xx in x0..x1 {
                        os[base + (xx as isize + dx) as usize] += src[y * w + xx];
                    }
                }
            }
        }
    }
    out
}

/// Output columns `x` for which `x + dx` stays inside `0..w`.
fn valid_range(w: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx).clamp(0, w as isize) as usize;
    (lo.min(hi), hi)
}

/// Stride-1 "same" convolution with zero padding. `groups` is either 1 or
/// equal to the channel count (depth-wise).
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, groups: usize) -> Tensor {
    let (ci, h, w) = dims3(x);
    let co = weight.shape()[0];
    let k = weight.shape()[2];
    let hw = h * w;
    let mut out = zeros(&[co, h, w]);
    if groups == 1 {
        let wm = mat(weight, co, ci * k * k);
        let mut om = mat_mut(&mut out, co, hw);
        if k == 1 {
            general_mat_mul(1.0, &wm, &mat(x, ci, hw), 0.0, &mut om);
        } else {
            let cols = im2col(x, k);
            general_mat_mul(1.0, &wm, &cols, 0.0, &mut om);
        }
    } else {
        depthwise_forward(x, weight, &mut out);
    }
    let bs = slice(bias);
    for (o, plane) in slice_mut(&mut out).chunks_mut(hw).enumerate() {
        let b = bs[o];
        if b != 0.0 {
            plane.iter_mut().for_each(|v| *v += b);
        }
    }
    out
}

fn depthwise_forward(x: &Tensor, weight: &Tensor, out: &mut Tensor) {
    let (c, h, w) = dims3(x);
    let k = weight.shape()[2];
    let p = (k / 2) as isize;
    let xs = slice(x);
    let ws = slice(weight);
    let os = slice_mut(out);
    for ch in 0..c {
        let xp = &xs[ch * h * w..(ch + 1) * h * w];
        let op = &mut os[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            let dy = ky as isize - p;
            for kx in 0..k {
                let dx = kx as isize - p;
                let wv = ws[(ch * k + ky) * k + kx];
                let (x0, x1) = valid_range(w, dx);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &xp[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut op[y * w..(y + 1) * w];
                    for xx in x0..x1 {
                        dst[xx] += wv * src[(xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`conv2d`]: returns `(dx, dweight, dbias)`.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    groups: usize,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (ci, h, w) = dims3(x);
    let co = weight.shape()[0];
    let k = weight.shape()[2];
    let hw = h * w;
    let mut dbias = zeros(&[co]);
    for (o, plane) in slice(dout).chunks(hw).enumerate() {
        dbias[o] = plane.iter().sum();
    }
    let mut dweight = zeros(weight.shape());
    if groups == 1 {
        let dm = mat(dout, co, hw);
        let wm = mat(weight, co, ci * k * k);
        let mut dwm = mat_mut(&mut dweight, co, ci * k * k);
        if k == 1 {
            let xm = mat(x, ci, hw);
            general_mat_mul(1.0, &dm, &xm.t(), 0.0, &mut dwm);
            let mut dx = zeros(&[ci, h, w]);
            general_mat_mul(1.0, &wm.t(), &dm, 0.0, &mut mat_mut(&mut dx, ci, hw));
            (dx, dweight, dbias)
        } else {
            let cols = im2col(x, k);
            general_mat_mul(1.0, &dm, &cols.t(), 0.0, &mut dwm);
            let mut dcols = Array2::<f64>::zeros((ci * k * k, hw));
            general_mat_mul(1.0, &wm.t(), &dm, 0.0, &mut dcols);
            (col2im(&dcols, ci, h, w, k), dweight, dbias)
        }
    } else {
        let p = (k / 2) as isize;
        let mut dx = zeros(&[ci, h, w]);
        let xs = slice(x);
        let ws = slice(weight);
        let ds = slice(dout);
        let dxs = slice_mut(&mut dx);
        let dws = slice_mut(&mut dweight);
        for ch in 0..ci {
            let base = ch * hw;
            for ky in 0..k {
                let dy = ky as isize - p;
                for kx in 0..k {
                    let dxo = kx as isize - p;
                    let widx = (ch * k + ky) * k + kx;
                    let wv = ws[widx];
                    let (x0, x1) = valid_range(w, dxo);
                    let mut acc = 0.0;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = base + sy as usize * w;
                        let drow = base + y * w;
                        for xx in x0..x1 {
                            let si = srow + (xx as isize + dxo) as usize;
                            let g = ds[drow + xx];
                            acc += g * xs[si];
                            dxs[si] += wv * g;
                        }
                    }
                    dws[widx] += acc;
                }
            }
        }
        (dx, dweight, dbias)
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    a + b
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    a * b
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GeLU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.mapv(gelu_scalar)
}

pub fn gelu_backward(x: &Tensor, dout: &Tensor) -> Tensor {
    let mut dx = dout.clone();
    dx.zip_mut_with(x, |d, &v| *d *= gelu_grad_scalar(v));
    dx
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalisation across channels, independently at every pixel.
/// Returns the output together with the per-pixel `(mean, 1/std)` pairs.
pub fn layer_norm(x: &Tensor, gain: &Tensor, shift: &Tensor) -> (Tensor, Vec<(f64, f64)>) {
    let (c, h, w) = dims3(x);
    let hw = h * w;
    let xs = slice(x);
    let gs = slice(gain);
    let bs = slice(shift);
    let mut stats = Vec::with_capacity(hw);
    let mut out = zeros(&[c, h, w]);
    let os = slice_mut(&mut out);
    for p in 0..hw {
        let mean = (0..c).map(|ch| xs[ch * hw + p]).sum::<f64>() / c as f64;
        let var = (0..c)
            .map(|ch| {
                let d = xs[ch * hw + p] - mean;
                d * d
            })
            .sum::<f64>()
            / c as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for ch in 0..c {
            os[ch * hw + p] = (xs[ch * hw + p] - mean) * rstd * gs[ch] + bs[ch];
        }
        stats.push((mean, rstd));
    }
    (out, stats)
}

/// Returns `(dx, dgain, dshift)`.
pub fn layer_norm_backward(
    x: &Tensor,
    gain: &Tensor,
    stats: &[(f64, f64)],
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (c, h, w) = dims3(x);
    let hw = h * w;
    let xs = slice(x);
    let gs = slice(gain);
    let ds = slice(dout);
    let mut dx = zeros(&[c, h, w]);
    let mut dg = zeros(&[c]);
    let mut db = zeros(&[c]);
    let dxs = slice_mut(&mut dx);
    let dgs = dg.as_slice_mut().unwrap();
    let dbs = db.as_slice_mut().unwrap();
    let inv_c = 1.0 / c as f64;
    for p in 0..hw {
        let (mean, rstd) = stats[p];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for ch in 0..c {
            let i = ch * hw + p;
            let xhat = (xs[i] - mean) * rstd;
            let g = ds[i];
            dgs[ch] += g * xhat;
            dbs[ch] += g;
            let dxhat = g * gs[ch];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        for ch in 0..c {
            let i = ch * hw + p;
            let xhat = (xs[i] - mean) * rstd;
            let dxhat = ds[i] * gs[ch];
            dxs[i] = rstd * (dxhat - inv_c * sum_dxhat - xhat * inv_c * sum_dxhat_xhat);
        }
    }
    (dx, dg, db)
}

pub fn pooled_len(len: usize, kernel: usize, stride: usize) -> usize {
    (len - kernel) / stride + 1
}

/// Max pooling without padding; ties resolve to the first maximum in
/// row-major window order. Also returns the flat argmax per output.
pub fn max_pool(x: &Tensor, kernel: usize, stride: usize) -> (Tensor, Vec<usize>) {
    let (c, h, w) = dims3(x);
    let (oh, ow) = (pooled_len(h, kernel, stride), pooled_len(w, kernel, stride));
    let xs = slice(x);
    let mut out = zeros(&[c, oh, ow]);
    let mut arg = vec![0usize; c * oh * ow];
    let os = slice_mut(&mut out);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let i = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                        if xs[i] > best {
                            best = xs[i];
                            best_i = i;
                        }
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                os[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (out, arg)
}

pub fn max_pool_backward(input_shape: &[usize], argmax: &[usize], dout: &Tensor) -> Tensor {
    let mut dx = zeros(input_shape);
    let dxs = slice_mut(&mut dx);
    for (&i, &g) in argmax.iter().zip(slice(dout)) {
        dxs[i] += g;
    }
    dx
}

/// Mirror index for reflect padding (edge sample not repeated). Works for
/// any offset by folding with period `2(n-1)`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Reflect-pads on the bottom and right edges only.
pub fn pad_reflect(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = dims3(x);
    let xs = slice(x);
    let rows: Vec<usize> = (0..out_h).map(|y| reflect_index(y as isize, h)).collect();
    let cols: Vec<usize> = (0..out_w).map(|x| reflect_index(x as isize, w)).collect();
    let mut out = zeros(&[c, out_h, out_w]);
    let os = slice_mut(&mut out);
    for ch in 0..c {
        for (y, &sy) in rows.iter().enumerate() {
            let src = &xs[(ch * h + sy) * w..(ch * h + sy + 1) * w];
            let dst = &mut os[(ch * out_h + y) * out_w..(ch * out_h + y + 1) * out_w];
            for (d, &sx) in dst.iter_mut().zip(&cols) {
                *d = src[sx];
            }
        }
    }
    out
}

pub fn pad_reflect_backward(dout: &Tensor, h: usize, w: usize) -> Tensor {
    let (c, oh, ow) = dims3(dout);
    let ds = slice(dout);
    let rows: Vec<usize> = (0..oh).map(|y| reflect_index(y as isize, h)).collect();
    let cols: Vec<usize> = (0..ow).map(|x| reflect_index(x as isize, w)).collect();
    let mut dx = zeros(&[c, h, w]);
    let dxs = slice_mut(&mut dx);
    for ch in 0..c {
        for (y, &sy) in rows.iter().enumerate() {
            let src = &ds[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
            for (g, &sx) in src.iter().zip(&cols) {
                dxs[(ch * h + sy) * w + sx] += g;
            }
        }
    }
    dx
}

/// Keeps the top-left `h×w` window.
pub fn crop(x: &Tensor, h: usize, w: usize) -> Tensor {
    let (c, ih, iw) = dims3(x);
    let xs = slice(x);
    let mut out = zeros(&[c, h, w]);
    let os = slice_mut(&mut out);
    for ch in 0..c {
        for y in 0..h {
            let s = (ch * ih + y) * iw;
            os[(ch * h + y) * w..(ch * h + y + 1) * w].copy_from_slice(&xs[s..s + w]);
        }
    }
    out
}

pub fn crop_backward(dout: &Tensor, ih: usize, iw: usize) -> Tensor {
    let (c, h, w) = dims3(dout);
    let ds = slice(dout);
    let mut dx = zeros(&[c, ih, iw]);
    let dxs = slice_mut(&mut dx);
    for ch in 0..c {
        for y in 0..h {
            let d = (ch * ih + y) * iw;
            dxs[d..d + w].copy_from_slice(&ds[(ch * h + y) * w..(ch * h + y + 1) * w]);
        }
    }
    dx
}

/// Per-axis sampling table for bilinear resampling with half-pixel centres
/// (`align_corners = false`), clamping at the borders.
#[derive(Clone, Debug)]
pub struct AxisInterp {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisInterp {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut lo = Vec::with_capacity(out_len);
        let mut hi = Vec::with_capacity(out_len);
        let mut frac = Vec::with_capacity(out_len);
        for o in 0..out_len {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(if i1 == i0 { 0.0 } else { src - i0 as f64 });
        }
        AxisInterp { lo, hi, frac }
    }
}

pub fn upsample_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = dims3(x);
    let ay = AxisInterp::new(h, out_h);
    let ax = AxisInterp::new(w, out_w);
    let xs = slice(x);
    let mut out = zeros(&[c, out_h, out_w]);
    let os = slice_mut(&mut out);
    for ch in 0..c {
        let plane = &xs[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1, fy) = (ay.lo[oy], ay.hi[oy], ay.frac[oy]);
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            let dst = &mut os[(ch * out_h + oy) * out_w..(ch * out_h + oy + 1) * out_w];
            for ox in 0..out_w {
                let (x0, x1, fx) = (ax.lo[ox], ax.hi[ox], ax.frac[ox]);
                let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
                let bot = r1[x0] * (1.0 - fx) + r1[x1] * fx;
                dst[ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward(dout: &Tensor, h: usize, w: usize) -> Tensor {
    let (c, out_h, out_w) = dims3(dout);
    let ay = AxisInterp::new(h, out_h);
    let ax = AxisInterp::new(w, out_w);
    let ds = slice(dout);
    let mut dx = zeros(&[c, h, w]);
    let dxs = slice_mut(&mut dx);
    for ch in 0..c {
        let plane = &mut dxs[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1, fy) = (ay.lo[oy], ay.hi[oy], ay.frac[oy]);
            for ox in 0..out_w {
                let (x0, x1, fx) = (ax.lo[ox], ax.hi[ox], ax.frac[ox]);
                let g = ds[(ch * out_h + oy) * out_w + ox];
                plane[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                plane[y0 * w + x1] += g * (1.0 - fy) * fx;
                plane[y1 * w + x0] += g * fy * (1.0 - fx);
                plane[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    dx
}

/// `(C·s²)×H×W → C×(H·s)×(W·s)`, channel `c·s² + i·s + j` landing at
/// sub-pixel offset `(i, j)`.
pub fn pixel_shuffle(x: &Tensor, s: usize) -> Tensor {
    let (cs2, h, w) = dims3(x);
    let c = cs2 / (s * s);
    let xs = slice(x);
    let (oh, ow) = (h * s, w * s);
    let mut out = zeros(&[c, oh, ow]);
    let os = slice_mut(&mut out);
    for ch in 0..c {
        for i in 0..s {
            for j in 0..s {
                let src = &xs[(ch * s * s + i * s + j) * h * w..][..h * w];
                for y in 0..h {
                    for xx in 0..w {
                        os[(ch * oh + y * s + i) * ow + xx * s + j] = src[y * w + xx];
                    }
                }
            }
        }
    }
    out
}

pub fn pixel_shuffle_backward(dout: &Tensor, s: usize) -> Tensor {
    let (c, oh, ow) = dims3(dout);
    let (h, w) = (oh / s, ow / s);
    let ds = slice(dout);
    let mut dx = zeros(&[c * s * s, h, w]);
    let dxs = slice_mut(&mut dx);
    for ch in 0..c {
        for i in 0..s {
            for j in 0..s {
                let dst = &mut dxs[(ch * s * s + i * s + j) * h * w..][..h * w];
                for y in 0..h {
                    for xx in 0..w {
                        dst[y * w + xx] = ds[(ch * oh + y * s + i) * ow + xx * s + j];
                    }
                }
            }
        }
    }
    dx
}

/// Softmax across the expert axis at every element, then the gated sum of
/// `values`. Returns `(output, weights)`.
pub fn gated_sum(logits: &[&Tensor], values: &[&Tensor]) -> (Tensor, Vec<Tensor>) {
    let k = logits.len();
    let shape = logits[0].shape().to_vec();
    let n = logits[0].len();
    let mut weights: Vec<Tensor> = (0..k).map(|_| zeros(&shape)).collect();
    let mut out = zeros(&shape);
    let ls: Vec<&[f64]> = logits.iter().map(|t| slice(t)).collect();
    let vs: Vec<&[f64]> = values.iter().map(|t| slice(t)).collect();
    let mut ws: Vec<Vec<f64>> = vec![vec![0.0; n]; k];
    let os = slice_mut(&mut out);
    for i in 0..n {
        let m = ls.iter().map(|l| l[i]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for e in 0..k {
            let v = (ls[e][i] - m).exp();
            ws[e][i] = v;
            z += v;
        }
        let mut acc = 0.0;
        for e in 0..k {
            ws[e][i] /= z;
            acc += ws[e][i] * vs[e][i];
        }
        os[i] = acc;
    }
    for (t, wv) in weights.iter_mut().zip(ws) {
        slice_mut(t).copy_from_slice(&wv);
    }
    (out, weights)
}

/// Returns `(dlogits, dvalues)`.
pub fn gated_sum_backward(
    values: &[&Tensor],
    weights: &[Tensor],
    out: &Tensor,
    dout: &Tensor,
) -> (Vec<Tensor>, Vec<Tensor>) {
    let mut dl = Vec::with_capacity(values.len());
    let mut dv = Vec::with_capacity(values.len());
    for (v, w) in values.iter().zip(weights) {
        dv.push(w * dout);
        let mut g = (*v) - out;
        g *= w;
        g *= dout;
        dl.push(g);
    }
    (dl, dv)
}
