//! FLOP accounting by replaying the forward pass on a shape-only graph.

use super::{SsiuConfig, SsiuModel};
use crate::error::{Error, Result};
use crate::nn::{BlockGrid, Graph, ParamId, ParamStore};

/// Unit costs applied by the counter.
pub const ACCOUNTING_RULES: &[&str] = &[
    "convolution: 2 x multiply-accumulates (out_ch * in_ch/groups * k*k per output pixel); bias adds not counted",
    "attention: 2 x MACs for Q*K^T and P*V per window and head, 3 FLOPs per logit for softmax, 1 per merged output element",
    "elementwise add, multiply, GeLU: 1 FLOP per output element",
    "layer norm: 4 FLOPs per element",
    "max pooling: k*k - 1 comparisons per output element",
    "bilinear resampling: 6 FLOPs per output element",
    "expert gate: 3 FLOPs per logit for softmax plus 2 per expert element for the weighted sum",
    "padding, cropping and pixel shuffle: free (data movement)",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopReport {
    pub input_hw: (usize, usize),
    pub output_hw: (usize, usize),
    pub total: u64,
    /// FLOPs spent inside the attention modules of all stages.
    pub attention: u64,
    pub rules: Vec<String>,
}

impl FlopReport {
    pub fn gflops(&self) -> f64 {
        self.total as f64 / 1e9
    }
}

struct Counter<'p> {
    params: &'p ParamStore,
    flops: u64,
}

type Shape = Vec<usize>;

fn numel(s: &Shape) -> u64 {
    s.iter().product::<usize>() as u64
}

impl Graph for Counter<'_> {
    type V = Shape;

    fn input(&mut self, t: crate::nn::Tensor) -> Shape {
        t.shape().to_vec()
    }

    fn param(&mut self, id: ParamId) -> Shape {
        self.params.get(id).shape().to_vec()
    }

    fn shape(&self, v: &Shape) -> (usize, usize, usize) {
        (v[0], v[1], v[2])
    }

    fn conv2d(&mut self, x: &Shape, weight: &Shape, _bias: &Shape, _groups: usize) -> Shape {
        let (co, cig, k) = (weight[0], weight[1], weight[2]);
        self.flops += 2 * (co * cig * k * k * x[1] * x[2]) as u64;
        vec![co, x[1], x[2]]
    }

    fn add(&mut self, a: &Shape, _b: &Shape) -> Shape {
        self.flops += numel(a);
        a.clone()
    }

    fn mul(&mut self, a: &Shape, _b: &Shape) -> Shape {
        self.flops += numel(a);
        a.clone()
    }

    fn gelu(&mut self, x: &Shape) -> Shape {
        self.flops += numel(x);
        x.clone()
    }

    fn layer_norm(&mut self, x: &Shape, _g: &Shape, _b: &Shape) -> Shape {
        self.flops += 4 * numel(x);
        x.clone()
    }

    fn max_pool(&mut self, x: &Shape, kernel: usize, stride: usize) -> Shape {
        let out = vec![
            x[0],
            (x[1] - kernel) / stride + 1,
            (x[2] - kernel) / stride + 1,
        ];
        self.flops += (kernel * kernel - 1) as u64 * numel(&out);
        out
    }

    fn pad_reflect(&mut self, x: &Shape, h: usize, w: usize) -> Shape {
        vec![x[0], h, w]
    }

    fn crop(&mut self, x: &Shape, h: usize, w: usize) -> Shape {
        vec![x[0], h, w]
    }

    fn upsample_bilinear(&mut self, x: &Shape, h: usize, w: usize) -> Shape {
        let out = vec![x[0], h, w];
        self.flops += 6 * numel(&out);
        out
    }

    fn pixel_shuffle(&mut self, x: &Shape, scale: usize) -> Shape {
        vec![x[0] / (scale * scale), x[1] * scale, x[2] * scale]
    }

    fn block_attention(&mut self, q: &Shape, _k: &Shape, _v: &Shape, grid: &BlockGrid, heads: usize) -> Shape {
        let t = grid.tokens() as u64;
        let d = (q[0] / heads) as u64;
        let per_head = 2 * t * t * d * 2 + 3 * t * t;
        let merge = q[0] as u64 * t;
        self.flops += grid.num_blocks() as u64 * (heads as u64 * per_head + merge);
        q.clone()
    }

    fn gated_sum(&mut self, logits: &[Shape], _values: &[Shape]) -> Shape {
        let k = logits.len() as u64;
        self.flops += numel(&logits[0]) * (3 * k + 2 * k);
        logits[0].clone()
    }
}

fn lr_size(cfg: &SsiuConfig, out_h: usize, out_w: usize) -> Result<(usize, usize)> {
    let (h, w) = (out_h / cfg.scale, out_w / cfg.scale);
    if h == 0 || w == 0 {
        return Err(Error::invalid(format!(
            "output {out_h}x{out_w} too small for scale {}",
            cfg.scale
        )));
    }
    Ok((h, w))
}

/// FLOPs of one forward pass producing an `out_h × out_w` image (input is
/// `out/scale`, rounded down).
pub fn estimate_flops(cfg: &SsiuConfig, out_h: usize, out_w: usize) -> Result<FlopReport> {
    let model = SsiuModel::build(cfg, 0)?;
    model.flops(out_h, out_w)
}

impl SsiuModel {
    pub fn flops(&self, out_h: usize, out_w: usize) -> Result<FlopReport> {
        let cfg = &self.config;
        let (h, w) = lr_size(cfg, out_h, out_w)?;
        let mut counter = Counter {
            params: &self.params,
            flops: 0,
        };
        let y = vec![3, h, w];
        let out = self.forward_graph(&mut counter, &y);
        let total = counter.flops;

        let mut attention = 0;
        for stage in &self.stages {
            let mut c = Counter {
                params: &self.params,
                flops: 0,
            };
            stage.esam.forward(&mut c, &vec![cfg.channels, h, w]);
            attention += c.flops;
        }
        Ok(FlopReport {
            input_hw: (h, w),
            output_hw: (out[1], out[2]),
            total,
            attention,
            rules: ACCOUNTING_RULES.iter().map(|s| s.to_string()).collect(),
        })
    }
}
