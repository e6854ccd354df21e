//! The full network: shallow 3×3 embedding, stacked refinement stages,
//! expert fusion of tapped stages, and a pixel-shuffle reconstruction head
//! added to a bilinear upsampling of the input.

mod config;
pub mod flops;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{EsamSettings, MsgmSettings, SsiuConfig, DEFAULT_HIDDEN_CHANNELS};
pub use flops::{estimate_flops, FlopReport};

use crate::blocks::{to_array3, to_tensor, Conv2d, MoeFs, SsRem};
use crate::error::{Error, Result};
use crate::nn::{Eager, Graph, ParamStore};

#[derive(Clone, Debug)]
pub struct SsiuModel {
    pub config: SsiuConfig,
    pub params: ParamStore,
    pub shallow: Conv2d,
    pub stages: Vec<SsRem>,
    pub moe: Option<MoeFs>,
    pub expand: Conv2d,
    pub output: Conv2d,
}

/// Stage-level values produced by a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardParts<V> {
    pub f_y: V,
    /// `α¹ … αᴺ`.
    pub alphas: Vec<V>,
    pub f_x: V,
    pub residual: V,
    pub base: V,
    pub output: V,
}

impl SsiuModel {
    /// Deterministic construction: the same `(config, seed)` always yields
    /// bit-identical parameters.
    pub fn build(config: &SsiuConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let s = config.scale;
        let shallow = Conv2d::new(&mut store, "shallow", 3, c, 3, 1, &mut rng);
        let msgm = config.msgm_config();
        let esam = config.esam_config();
        let stages = (0..config.num_stages)
            .map(|t| {
                SsRem::new(
                    &mut store,
                    &format!("stages.{t}"),
                    &msgm,
                    &esam,
                    config.attention_mode,
                    &mut rng,
                )
            })
            .collect();
        let moe = config
            .use_moe_fs
            .then(|| MoeFs::new(&mut store, "moe", &config.moe_config(), &mut rng));
        let expand = Conv2d::pointwise(&mut store, "head.expand", c, c * s * s, &mut rng);
        let output = Conv2d::new(&mut store, "head.output", c, 3, 3, 1, &mut rng);
        Ok(SsiuModel {
            config: config.clone(),
            params: store,
            shallow,
            stages,
            moe,
            expand,
            output,
        })
    }

    /// Rebuilds the module structure for `config` and installs `params`,
    /// which must match names and shapes exactly.
    pub fn from_params(config: &SsiuConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::build(config, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((en, et), (gn, gt)) in model.params.iter().zip(params.iter()) {
            if en != gn || et.shape() != gt.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected `{en}` {:?}, found `{gn}` {:?}",
                    et.shape(),
                    gt.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn count_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn scale(&self) -> usize {
        self.config.scale
    }

    pub fn forward_parts<G: Graph>(&self, g: &mut G, y: &G::V) -> ForwardParts<G::V> {
        let (_, h, w) = g.shape(y);
        let s = self.config.scale;
        let f_y = self.shallow.forward(g, y);
        let mut alpha = f_y.clone();
        let mut alphas = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            alpha = stage.forward(g, &alpha, &f_y);
            alphas.push(alpha.clone());
        }
        let f_x = match &self.moe {
            Some(moe) => {
                let taps: Vec<G::V> = self
                    .config
                    .moe_taps
                    .iter()
                    .map(|&t| alphas[t - 1].clone())
                    .collect();
                moe.forward(g, &taps)
            }
            None => alpha,
        };
        let fused = g.add(&f_x, &f_y);
        let e = self.expand.forward(g, &fused);
        let shuffled = g.pixel_shuffle(&e, s);
        let act = g.gelu(&shuffled);
        let residual = self.output.forward(g, &act);
        let base = g.upsample_bilinear(y, h * s, w * s);
        let output = g.add(&residual, &base);
        ForwardParts {
            f_y,
            alphas,
            f_x,
            residual,
            base,
            output,
        }
    }

    pub fn forward_graph<G: Graph>(&self, g: &mut G, y: &G::V) -> G::V {
        self.forward_parts(g, y).output
    }

    /// Super-resolves a `3×h×w` image. No clamping is applied.
    pub fn forward(&self, y: &Array3<f64>) -> Result<Array3<f64>> {
        let (c, h, w) = y.dim();
        if c != 3 {
            return Err(Error::invalid(format!("expected a 3-channel image, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::invalid("empty image"));
        }
        let mut g = Eager::new(&self.params);
        let v = g.input(to_tensor(y));
        let out = self.forward_graph(&mut g, &v);
        drop(v);
        Ok(to_array3(std::rc::Rc::try_unwrap(out).unwrap_or_else(|rc| (*rc).clone())))
    }
}
