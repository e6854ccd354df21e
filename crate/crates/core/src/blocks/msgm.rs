//! Mixed-scale gating module: a GeLU-activated pointwise branch gates a
//! pointwise → depth-wise → pointwise branch, followed by a pointwise
//! projection back to the input width.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::Conv2d;
use super::{check_channels, run_eager};
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MsgmConfig {
    pub channels: usize,
    pub hidden_channels: usize,
    pub dw_kernel: usize,
}

impl MsgmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.hidden_channels == 0 {
            return Err(Error::invalid("msgm channel widths must be positive"));
        }
        if self.dw_kernel < 3 || self.dw_kernel % 2 == 0 {
            return Err(Error::invalid(format!(
                "msgm dw_kernel must be odd and >= 3, got {}",
                self.dw_kernel
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (c, h, k) = (self.channels, self.hidden_channels, self.dw_kernel);
        2 * Conv2d::param_count(c, h, 1, 1)
            + Conv2d::param_count(h, h, k, h)
            + Conv2d::param_count(h, h, 1, 1)
            + Conv2d::param_count(h, c, 1, 1)
    }
}

#[derive(Clone, Debug)]
pub struct Msgm {
    pub config: MsgmConfig,
    pub gate: Conv2d,
    pub expand: Conv2d,
    pub depthwise: Conv2d,
    pub mix: Conv2d,
    pub project: Conv2d,
}

impl Msgm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, config: &MsgmConfig, rng: &mut R) -> Self {
        let (c, h, k) = (config.channels, config.hidden_channels, config.dw_kernel);
        Msgm {
            config: config.clone(),
            gate: Conv2d::pointwise(store, &format!("{name}.gate"), c, h, rng),
            expand: Conv2d::pointwise(store, &format!("{name}.expand"), c, h, rng),
            depthwise: Conv2d::new(store, &format!("{name}.depthwise"), h, h, k, h, rng),
            mix: Conv2d::pointwise(store, &format!("{name}.mix"), h, h, rng),
            project: Conv2d::pointwise(store, &format!("{name}.project"), h, c, rng),
        }
    }

    pub fn forward<G: Graph>(&self, g: &mut G, x: &G::V) -> G::V {
        let f1 = self.gate.forward(g, x);
        let e = self.expand.forward(g, x);
        let d = self.depthwise.forward(g, &e);
        let f2 = self.mix.forward(g, &d);
        let a = g.gelu(&f1);
        let gated = g.mul(&a, &f2);
        self.project.forward(g, &gated)
    }

    pub fn apply(&self, params: &ParamStore, x: &Array3<f64>) -> Result<Array3<f64>> {
        check_channels(x, self.config.channels, "msgm")?;
        Ok(run_eager(params, x, |g, v| self.forward(g, v)))
    }
}
