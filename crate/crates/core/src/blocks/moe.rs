//! Mixture-of-experts feature selector over tapped stage outputs.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::Conv2d;
use super::{to_array3, to_tensor};
use crate::error::{Error, Result};
use crate::nn::{Eager, Graph, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeFsConfig {
    pub channels: usize,
    pub num_experts: usize,
}

impl MoeFsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_experts < 2 {
            return Err(Error::invalid("moe num_experts must be >= 2"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        (self.num_experts + 1) * Conv2d::param_count(self.channels, self.channels, 1, 1)
    }
}

#[derive(Clone, Debug)]
pub struct MoeFs {
    pub config: MoeFsConfig,
    pub experts: Vec<Conv2d>,
    pub fuse: Conv2d,
}

impl MoeFs {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, config: &MoeFsConfig, rng: &mut R) -> Self {
        let c = config.channels;
        let experts = (0..config.num_experts)
            .map(|i| Conv2d::pointwise(store, &format!("{name}.expert{i}"), c, c, rng))
            .collect();
        MoeFs {
            config: config.clone(),
            experts,
            fuse: Conv2d::pointwise(store, &format!("{name}.fuse"), c, c, rng),
        }
    }

    pub fn forward<G: Graph>(&self, g: &mut G, alphas: &[G::V]) -> G::V {
        let logits: Vec<G::V> = self
            .experts
            .iter()
            .zip(alphas)
            .map(|(conv, a)| conv.forward(g, a))
            .collect();
        let mixed = g.gated_sum(&logits, alphas);
        let refined = self.fuse.forward(g, &mixed);
        g.add(&mixed, &refined)
    }

    fn check(&self, alphas: &[Array3<f64>]) -> Result<()> {
        if alphas.len() != self.config.num_experts {
            return Err(Error::invalid(format!(
                "moe expects {} experts, got {}",
                self.config.num_experts,
                alphas.len()
            )));
        }
        let d0 = alphas[0].dim();
        if d0.0 != self.config.channels {
            return Err(Error::invalid(format!(
                "moe expects {} channels, got {}",
                self.config.channels, d0.0
            )));
        }
        if alphas.iter().any(|a| a.dim() != d0) {
            return Err(Error::invalid("moe experts differ in shape"));
        }
        Ok(())
    }

    pub fn apply(&self, params: &ParamStore, alphas: &[Array3<f64>]) -> Result<Array3<f64>> {
        Ok(self.apply_traced(params, alphas)?.0)
    }

    /// Output together with the per-element gate weight map of each expert.
    pub fn apply_traced(
        &self,
        params: &ParamStore,
        alphas: &[Array3<f64>],
    ) -> Result<(Array3<f64>, Vec<Array3<f64>>)> {
        self.check(alphas)?;
        let mut g = Eager::with_trace(params);
        let vs: Vec<_> = alphas.iter().map(|a| g.input(to_tensor(a))).collect();
        let out = self.forward(&mut g, &vs);
        let out = to_array3((*out).clone());
        let mut trace = g.take_trace().unwrap_or_default();
        let gates = trace
            .gates
            .pop()
            .expect("gate recorded")
            .into_iter()
            .map(to_array3)
            .collect();
        Ok((out, gates))
    }
}
