use std::rc::Rc;

use super::attention::{block_attention, BlockGrid};
use super::kernels;
use super::params::{ParamId, ParamStore};
use super::Tensor;

/// Operations available to network blocks. Blocks are written once against
/// this trait and evaluated either eagerly ([`Eager`]) or on a gradient
/// tape ([`super::Tape`]).
pub trait Graph {
    type V: Clone;

    fn input(&mut self, t: Tensor) -> Self::V;
    fn param(&mut self, id: ParamId) -> Self::V;
    fn shape(&self, v: &Self::V) -> (usize, usize, usize);

    fn conv2d(&mut self, x: &Self::V, weight: &Self::V, bias: &Self::V, groups: usize) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn gelu(&mut self, x: &Self::V) -> Self::V;
    fn layer_norm(&mut self, x: &Self::V, gain: &Self::V, shift: &Self::V) -> Self::V;
    fn max_pool(&mut self, x: &Self::V, kernel: usize, stride: usize) -> Self::V;
    fn pad_reflect(&mut self, x: &Self::V, h: usize, w: usize) -> Self::V;
    fn crop(&mut self, x: &Self::V, h: usize, w: usize) -> Self::V;
    fn upsample_bilinear(&mut self, x: &Self::V, h: usize, w: usize) -> Self::V;
    fn pixel_shuffle(&mut self, x: &Self::V, scale: usize) -> Self::V;
    fn block_attention(
        &mut self,
        q: &Self::V,
        k: &Self::V,
        v: &Self::V,
        grid: &BlockGrid,
        heads: usize,
    ) -> Self::V;
    fn gated_sum(&mut self, logits: &[Self::V], values: &[Self::V]) -> Self::V;
}

/// Attention probabilities captured from one window-attention call.
#[derive(Clone, Debug)]
pub struct AttentionProbe {
    pub grid: BlockGrid,
    pub heads: usize,
    /// `[block][head][t][t]`, row-major.
    pub probs: Vec<f64>,
}

impl AttentionProbe {
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.grid.tokens())
    }
}

/// Instrumentation captured during an eager forward pass.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub attention: Vec<AttentionProbe>,
    /// Per gated-sum call, the softmax weight map of every expert.
    pub gates: Vec<Vec<Tensor>>,
}

/// Direct evaluation without recording; intermediates are freed as soon as
/// they go out of scope.
pub struct Eager<'p> {
    params: &'p ParamStore,
    trace: Option<Trace>,
}

impl<'p> Eager<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Eager {
            params,
            trace: None,
        }
    }

    pub fn with_trace(params: &'p ParamStore) -> Self {
        Eager {
            params,
            trace: Some(Trace::default()),
        }
    }

    pub fn take_trace(&mut self) -> Option<Trace> {
        self.trace.take()
    }
}

impl Graph for Eager<'_> {
    type V = Rc<Tensor>;

    fn input(&mut self, t: Tensor) -> Self::V {
        Rc::new(t.as_standard_layout().into_owned())
    }

    fn param(&mut self, id: ParamId) -> Self::V {
        Rc::new(self.params.get(id).clone())
    }

    fn shape(&self, v: &Self::V) -> (usize, usize, usize) {
        kernels::dims3(v)
    }

    fn conv2d(&mut self, x: &Self::V, weight: &Self::V, bias: &Self::V, groups: usize) -> Self::V {
        Rc::new(kernels::conv2d(x, weight, bias, groups))
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        Rc::new(kernels::add(a, b))
    }

    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        Rc::new(kernels::mul(a, b))
    }

    fn gelu(&mut self, x: &Self::V) -> Self::V {
        Rc::new(kernels::gelu(x))
    }

    fn layer_norm(&mut self, x: &Self::V, gain: &Self::V, shift: &Self::V) -> Self::V {
        Rc::new(kernels::layer_norm(x, gain, shift).0)
    }

    fn max_pool(&mut self, x: &Self::V, kernel: usize, stride: usize) -> Self::V {
        Rc::new(kernels::max_pool(x, kernel, stride).0)
    }

    fn pad_reflect(&mut self, x: &Self::V, h: usize, w: usize) -> Self::V {
        Rc::new(kernels::pad_reflect(x, h, w))
    }

    fn crop(&mut self, x: &Self::V, h: usize, w: usize) -> Self::V {
        Rc::new(kernels::crop(x, h, w))
    }

    fn upsample_bilinear(&mut self, x: &Self::V, h: usize, w: usize) -> Self::V {
        Rc::new(kernels::upsample_bilinear(x, h, w))
    }

    fn pixel_shuffle(&mut self, x: &Self::V, scale: usize) -> Self::V {
        Rc::new(kernels::pixel_shuffle(x, scale))
    }

    fn block_attention(
        &mut self,
        q: &Self::V,
        k: &Self::V,
        v: &Self::V,
        grid: &BlockGrid,
        heads: usize,
    ) -> Self::V {
        let keep = self.trace.is_some();
        let (out, probs) = block_attention(q, k, v, grid, heads, keep);
        if let Some(trace) = &mut self.trace {
            trace.attention.push(AttentionProbe {
                grid: grid.clone(),
                heads,
                probs,
            });
        }
        Rc::new(out)
    }

    fn gated_sum(&mut self, logits: &[Self::V], values: &[Self::V]) -> Self::V {
        let l: Vec<&Tensor> = logits.iter().map(|t| t.as_ref()).collect();
        let v: Vec<&Tensor> = values.iter().map(|t| t.as_ref()).collect();
        let (out, weights) = kernels::gated_sum(&l, &v);
        if let Some(trace) = &mut self.trace {
            trace.gates.push(weights);
        }
        Rc::new(out)
    }
}
