//! Multi-head self-attention inside overlapping square windows.

use super::kernels::{dims3, slice, slice_mut, zeros};
use super::Tensor;
use crate::error::{Error, Result};

/// Placement of overlapping `block×block` windows on an `height×width` map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockGrid {
    pub height: usize,
    pub width: usize,
    pub block: usize,
    pub step: usize,
    pub rows: usize,
    pub cols: usize,
}

impl BlockGrid {
    /// The map must already be sized so that windows tile it exactly.
    pub fn new(height: usize, width: usize, block: usize, overlap: usize) -> Result<Self> {
        if block == 0 {
            return Err(Error::invalid("block size must be positive"));
        }
        if overlap >= block {
            return Err(Error::invalid(format!(
                "overlap {overlap} must be smaller than block size {block}"
            )));
        }
        if height < block || width < block {
            return Err(Error::invalid(format!(
                "map {height}x{width} is smaller than block {block}"
            )));
        }
        let step = block - overlap;
        if (height - block) % step != 0 || (width - block) % step != 0 {
            return Err(Error::invalid(format!(
                "map {height}x{width} is not tiled by block {block} with step {step}"
            )));
        }
        Ok(BlockGrid {
            height,
            width,
            block,
            step,
            rows: (height - block) / step + 1,
            cols: (width - block) / step + 1,
        })
    }

    /// Smallest length `>= len` (and `>= block`) that windows tile exactly.
    pub fn fitted_len(len: usize, block: usize, overlap: usize) -> usize {
        let step = block - overlap;
        if len <= block {
            return block;
        }
        block + (len - block).div_ceil(step) * step
    }

    pub fn num_blocks(&self) -> usize {
        self.rows * self.cols
    }

    pub fn tokens(&self) -> usize {
        self.block * self.block
    }

    /// Top-left corner of every window, row-major.
    pub fn origins(&self) -> Vec<(usize, usize)> {
        let mut v = Vec::with_capacity(self.num_blocks());
        for r in 0..self.rows {
            for c in 0..self.cols {
                v.push((r * self.step, c * self.step));
            }
        }
        v
    }

    /// Flat spatial index of every token of a window, row-major inside it.
    pub fn token_positions(&self, origin: (usize, usize)) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.tokens());
        for dy in 0..self.block {
            for dx in 0..self.block {
                v.push((origin.0 + dy) * self.width + origin.1 + dx);
            }
        }
        v
    }

    /// Number of windows covering each spatial position.
    pub fn coverage(&self) -> Vec<f64> {
        let mut cov = vec![0.0; self.height * self.width];
        for o in self.origins() {
            for p in self.token_positions(o) {
                cov[p] += 1.0;
            }
        }
        cov
    }
}

/// Attention over one window and head. `q`, `k`, `v` are `t×d` row-major;
/// returns `(y, probs)` with `probs` the `t×t` row-stochastic matrix.
pub fn attend(q: &[f64], k: &[f64], v: &[f64], t: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (d as f64).sqrt();
    let mut probs = vec![0.0; t * t];
    for i in 0..t {
        let qi = &q[i * d..(i + 1) * d];
        let row = &mut probs[i * t..(i + 1) * t];
        let mut m = f64::NEG_INFINITY;
        for j in 0..t {
            let kj = &k[j * d..(j + 1) * d];
            let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            row[j] = s;
            m = m.max(s);
        }
        let mut z = 0.0;
        for r in row.iter_mut() {
            *r = (*r - m).exp();
            z += *r;
        }
        row.iter_mut().for_each(|r| *r /= z);
    }
    let mut y = vec![0.0; t * d];
    for i in 0..t {
        let yi = &mut y[i * d..(i + 1) * d];
        for j in 0..t {
            let p = probs[i * t + j];
            let vj = &v[j * d..(j + 1) * d];
            for (a, b) in yi.iter_mut().zip(vj) {
                *a += p * b;
            }
        }
    }
    (y, probs)
}

fn gather(map: &[f64], hw: usize, ch0: usize, d: usize, pos: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; pos.len() * d];
    for (t, &p) in pos.iter().enumerate() {
        for c in 0..d {
            out[t * d + c] = map[(ch0 + c) * hw + p];
        }
    }
    out
}

fn scatter_add(map: &mut [f64], hw: usize, ch0: usize, d: usize, pos: &[usize], vals: &[f64], w: &[f64]) {
    for (t, &p) in pos.iter().enumerate() {
        for c in 0..d {
            map[(ch0 + c) * hw + p] += vals[t * d + c] * w[p];
        }
    }
}

/// Window attention on full `C×H×W` query/key/value maps; window outputs
/// are merged back by averaging over overlapping windows. Probabilities are
/// returned in `[block][head][t][t]` order when `keep_probs` is set.
pub fn block_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    grid: &BlockGrid,
    heads: usize,
    keep_probs: bool,
) -> (Tensor, Vec<f64>) {
    let (c, h, w) = dims3(q);
    let hw = h * w;
    let d = c / heads;
    let t = grid.tokens();
    let inv_cov: Vec<f64> = grid.coverage().iter().map(|n| 1.0 / n).collect();
    let (qs, ks, vs) = (slice(q), slice(k), slice(v));
    let mut out = zeros(&[c, h, w]);
    let mut all_probs = if keep_probs {
        Vec::with_capacity(grid.num_blocks() * heads * t * t)
    } else {
        Vec::new()
    };
    let os = slice_mut(&mut out);
    for origin in grid.origins() {
        let pos = grid.token_positions(origin);
        for head in 0..heads {
            let ch0 = head * d;
            let qb = gather(qs, hw, ch0, d, &pos);
            let kb = gather(ks, hw, ch0, d, &pos);
            let vb = gather(vs, hw, ch0, d, &pos);
            let (y, probs) = attend(&qb, &kb, &vb, t, d);
            scatter_add(os, hw, ch0, d, &pos, &y, &inv_cov);
            if keep_probs {
                all_probs.extend_from_slice(&probs);
            }
        }
    }
    (out, all_probs)
}

/// Adjoint of [`block_attention`]; probabilities are recomputed per window.
pub fn block_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    grid: &BlockGrid,
    heads: usize,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (c, h, w) = dims3(q);
    let hw = h * w;
    let d = c / heads;
    let t = grid.tokens();
    let scale = 1.0 / (d as f64).sqrt();
    let inv_cov: Vec<f64> = grid.coverage().iter().map(|n| 1.0 / n).collect();
    let ones = vec![1.0; hw];
    let (qs, ks, vs, ds) = (slice(q), slice(k), slice(v), slice(dout));
    let mut dq = zeros(&[c, h, w]);
    let mut dk = zeros(&[c, h, w]);
    let mut dv = zeros(&[c, h, w]);
    for origin in grid.origins() {
        let pos = grid.token_positions(origin);
        for head in 0..heads {
            let ch0 = head * d;
            let qb = gather(qs, hw, ch0, d, &pos);
            let kb = gather(ks, hw, ch0, d, &pos);
            let vb = gather(vs, hw, ch0, d, &pos);
            let (_, p) = attend(&qb, &kb, &vb, t, d);
            let mut dy = gather(ds, hw, ch0, d, &pos);
            for (ti, &ps) in pos.iter().enumerate() {
                dy[ti * d..(ti + 1) * d].iter_mut().for_each(|g| *g *= inv_cov[ps]);
            }
            // dV = Pᵀ dY ; dP = dY Vᵀ
            let mut dvb = vec![0.0; t * d];
            let mut ds_mat = vec![0.0; t * t];
            for i in 0..t {
                let dyi = &dy[i * d..(i + 1) * d];
                for j in 0..t {
                    let pij = p[i * t + j];
                    let vj = &vb[j * d..(j + 1) * d];
                    let mut dp = 0.0;
                    for cc in 0..d {
                        dvb[j * d + cc] += pij * dyi[cc];
                        dp += dyi[cc] * vj[cc];
                    }
                    ds_mat[i * t + j] = dp;
                }
                let row = &mut ds_mat[i * t..(i + 1) * t];
                let prow = &p[i * t..(i + 1) * t];
                let dot: f64 = row.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (g, &pp) in row.iter_mut().zip(prow) {
                    *g = pp * (*g - dot) * scale;
                }
            }
            let mut dqb = vec![0.0; t * d];
            let mut dkb = vec![0.0; t * d];
            for i in 0..t {
                for j in 0..t {
                    let g = ds_mat[i * t + j];
                    if g == 0.0 {
                        continue;
                    }
                    for cc in 0..d {
                        dqb[i * d + cc] += g * kb[j * d + cc];
                        dkb[j * d + cc] += g * qb[i * d + cc];
                    }
                }
            }
            scatter_add(slice_mut(&mut dq), hw, ch0, d, &pos, &dqb, &ones);
            scatter_add(slice_mut(&mut dk), hw, ch0, d, &pos, &dkb, &ones);
            scatter_add(slice_mut(&mut dv), hw, ch0, d, &pos, &dvb, &ones);
        }
    }
    (dq, dk, dv)
}
