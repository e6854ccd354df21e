use ndarray::IxDyn;
use rand::Rng;

use crate::nn::params::trunc_normal;
use crate::nn::{Graph, ParamId, ParamStore, Tensor};

pub const INIT_STD: f64 = 0.02;

/// Stride-1 "same" convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub groups: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        assert!(groups == 1 || (groups == in_channels && groups == out_channels));
        let shape = [out_channels, in_channels / groups, kernel, kernel];
        let weight = store.add(format!("{name}.weight"), trunc_normal(&shape, INIT_STD, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(IxDyn(&[out_channels])));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            groups,
        }
    }

    pub fn pointwise<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, in_channels, out_channels, 1, 1, rng)
    }

    pub fn forward<G: Graph>(&self, g: &mut G, x: &G::V) -> G::V {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, &w, &b, self.groups)
    }

    pub fn param_count(in_channels: usize, out_channels: usize, kernel: usize, groups: usize) -> usize {
        out_channels * (in_channels / groups) * kernel * kernel + out_channels
    }

    /// Multiply-accumulates per output pixel.
    pub fn macs_per_pixel(&self) -> u64 {
        (self.out_channels * (self.in_channels / self.groups) * self.kernel * self.kernel) as u64
    }
}

/// Channel-wise layer normalisation with affine gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.weight"), Tensor::ones(IxDyn(&[channels]))),
            shift: store.add(format!("{name}.bias"), Tensor::zeros(IxDyn(&[channels]))),
        }
    }

    pub fn forward<G: Graph>(&self, g: &mut G, x: &G::V) -> G::V {
        let gain = g.param(self.gain);
        let shift = g.param(self.shift);
        g.layer_norm(x, &gain, &shift)
    }
}
