//! Efficient sparse attention: max-pool the map, run self-attention inside
//! overlapping windows of the pooled map, refine with a 3×3 convolution and
//! bilinearly resample back to the input resolution.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::Conv2d;
use super::{check_channels, run_eager, to_array3, to_tensor};
use crate::error::{Error, Result};
use crate::nn::{kernels, AttentionProbe, BlockGrid, Eager, Graph, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Windows on the max-pooled map.
    #[default]
    Sparse,
    /// Windows on the full-resolution map (no pooling or resampling).
    Dense,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EsamConfig {
    pub channels: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub block_size: usize,
    pub overlap: usize,
    pub num_heads: usize,
}

impl EsamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool_kernel == 0 || self.pool_stride == 0 {
            return Err(Error::invalid("esam pool kernel and stride must be >= 1"));
        }
        if self.block_size == 0 || self.overlap >= self.block_size {
            return Err(Error::invalid(format!(
                "esam overlap {} must be smaller than block size {}",
                self.overlap, self.block_size
            )));
        }
        if self.num_heads == 0 || self.channels % self.num_heads != 0 {
            return Err(Error::invalid(format!(
                "esam channels {} not divisible by num_heads {}",
                self.channels, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let c = self.channels;
        3 * Conv2d::param_count(c, c, 1, 1) + Conv2d::param_count(c, c, 3, 1)
    }

    /// Smallest length `>= len` that pools without a remainder.
    pub fn pool_input_len(&self, len: usize) -> usize {
        let (k, s) = (self.pool_kernel, self.pool_stride);
        if len <= k {
            return k;
        }
        k + (len - k).div_ceil(s) * s
    }
}

/// Max-pooling with the configured kernel and stride, no padding.
pub fn sparse_downsample(x: &Array3<f64>, cfg: &EsamConfig) -> Result<Array3<f64>> {
    let (_, h, w) = x.dim();
    if h < cfg.pool_kernel || w < cfg.pool_kernel {
        return Err(Error::invalid(format!(
            "map {h}x{w} smaller than pooling kernel {}",
            cfg.pool_kernel
        )));
    }
    let t = to_tensor(x);
    Ok(to_array3(kernels::max_pool(&t, cfg.pool_kernel, cfg.pool_stride).0))
}

/// Splits a map into overlapping windows, each flattened to `C × M²`
/// (row-major inside the window). Windows are listed row-major.
pub fn block_partition(
    x: &Array3<f64>,
    block: usize,
    overlap: usize,
) -> Result<(BlockGrid, Vec<Array2<f64>>)> {
    let (c, h, w) = x.dim();
    let grid = BlockGrid::new(h, w, block, overlap)?;
    let blocks = grid
        .origins()
        .into_iter()
        .map(|(oy, ox)| {
            let mut b = Array2::zeros((c, block * block));
            for ch in 0..c {
                for dy in 0..block {
                    for dx in 0..block {
                        b[[ch, dy * block + dx]] = x[[ch, oy + dy, ox + dx]];
                    }
                }
            }
            b
        })
        .collect();
    Ok((grid, blocks))
}

/// Inverse of [`block_partition`]: overlapping positions are averaged.
pub fn block_merge(grid: &BlockGrid, blocks: &[Array2<f64>]) -> Result<Array3<f64>> {
    if blocks.len() != grid.num_blocks() {
        return Err(Error::invalid(format!(
            "expected {} blocks, got {}",
            grid.num_blocks(),
            blocks.len()
        )));
    }
    let c = blocks.first().map_or(0, |b| b.nrows());
    let m = grid.block;
    let mut out = Array3::zeros((c, grid.height, grid.width));
    let cov = grid.coverage();
    for (b, (oy, ox)) in blocks.iter().zip(grid.origins()) {
        if b.dim() != (c, m * m) {
            return Err(Error::invalid("block shape mismatch"));
        }
        for ch in 0..c {
            for dy in 0..m {
                for dx in 0..m {
                    let (y, x) = (oy + dy, ox + dx);
                    out[[ch, y, x]] += b[[ch, dy * m + dx]] / cov[y * grid.width + x];
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Esam {
    pub config: EsamConfig,
    pub mode: AttentionMode,
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    pub refine: Conv2d,
}

impl Esam {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        config: &EsamConfig,
        mode: AttentionMode,
        rng: &mut R,
    ) -> Self {
        let c = config.channels;
        Esam {
            config: config.clone(),
            mode,
            query: Conv2d::pointwise(store, &format!("{name}.query"), c, c, rng),
            key: Conv2d::pointwise(store, &format!("{name}.key"), c, c, rng),
            value: Conv2d::pointwise(store, &format!("{name}.value"), c, c, rng),
            refine: Conv2d::new(store, &format!("{name}.refine"), c, c, 3, 1, rng),
        }
    }

    /// Spatial size of the map the windows run on, before window padding.
    pub fn attention_map_size(&self, h: usize, w: usize) -> (usize, usize) {
        match self.mode {
            AttentionMode::Sparse => {
                let cfg = &self.config;
                (
                    kernels::pooled_len(cfg.pool_input_len(h), cfg.pool_kernel, cfg.pool_stride),
                    kernels::pooled_len(cfg.pool_input_len(w), cfg.pool_kernel, cfg.pool_stride),
                )
            }
            AttentionMode::Dense => (h, w),
        }
    }

    pub fn grid_for(&self, h: usize, w: usize) -> BlockGrid {
        let (h1, w1) = self.attention_map_size(h, w);
        let (m, o) = (self.config.block_size, self.config.overlap);
        BlockGrid::new(
            BlockGrid::fitted_len(h1, m, o),
            BlockGrid::fitted_len(w1, m, o),
            m,
            o,
        )
        .expect("fitted grid")
    }

    pub fn forward<G: Graph>(&self, g: &mut G, x: &G::V) -> G::V {
        let (_, h, w) = g.shape(x);
        let cfg = &self.config;
        let pooled = match self.mode {
            AttentionMode::Sparse => {
                let (ph, pw) = (cfg.pool_input_len(h), cfg.pool_input_len(w));
                let xp = if (ph, pw) != (h, w) {
                    g.pad_reflect(x, ph, pw)
                } else {
                    x.clone()
                };
                g.max_pool(&xp, cfg.pool_kernel, cfg.pool_stride)
            }
            AttentionMode::Dense => x.clone(),
        };
        let (_, h1, w1) = g.shape(&pooled);
        let grid = self.grid_for(h, w);
        let tiled = if (grid.height, grid.width) != (h1, w1) {
            g.pad_reflect(&pooled, grid.height, grid.width)
        } else {
            pooled
        };
        let q = self.query.forward(g, &tiled);
        let k = self.key.forward(g, &tiled);
        let v = self.value.forward(g, &tiled);
        let mut y = g.block_attention(&q, &k, &v, &grid, cfg.num_heads);
        if (grid.height, grid.width) != (h1, w1) {
            y = g.crop(&y, h1, w1);
        }
        let y = self.refine.forward(g, &y);
        match self.mode {
            AttentionMode::Sparse => {
                let (ph, pw) = (cfg.pool_input_len(h), cfg.pool_input_len(w));
                let up = g.upsample_bilinear(&y, ph, pw);
                if (ph, pw) != (h, w) {
                    g.crop(&up, h, w)
                } else {
                    up
                }
            }
            AttentionMode::Dense => y,
        }
    }

    pub fn apply(&self, params: &ParamStore, x: &Array3<f64>) -> Result<Array3<f64>> {
        check_channels(x, self.config.channels, "esam")?;
        Ok(run_eager(params, x, |g, v| self.forward(g, v)))
    }

    /// Runs the module and returns its output with the captured attention
    /// probabilities.
    pub fn apply_traced(
        &self,
        params: &ParamStore,
        x: &Array3<f64>,
    ) -> Result<(Array3<f64>, AttentionProbe)> {
        check_channels(x, self.config.channels, "esam")?;
        let mut g = Eager::with_trace(params);
        let v = g.input(to_tensor(x));
        let out = self.forward(&mut g, &v);
        let out = to_array3((*out).clone());
        let mut trace = g.take_trace().unwrap_or_default();
        let probe = trace.attention.pop().expect("attention was recorded");
        Ok((out, probe))
    }
}
