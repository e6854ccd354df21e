//! One unfolded refinement stage:
//!
//! ```text
//! z     = MSGM1(LN1(α))
//! β     = MSGM2(LN2(α))
//! v̂     = z + α + f_y
//! v     = ESAM(v̂) + v̂
//! α̂     = MSGM3(v + β) + β
//! α'    = MSGM4(α̂) + α̂
//! ```

use ndarray::Array3;
use rand::Rng;

use super::esam::{AttentionMode, Esam, EsamConfig};
use super::layers::LayerNorm;
use super::msgm::{Msgm, MsgmConfig};
use super::{to_array3, to_tensor};
use crate::error::{Error, Result};
use crate::nn::{Eager, Graph, ParamStore};

#[derive(Clone, Debug)]
pub struct SsRem {
    pub norm_sparse: LayerNorm,
    pub norm_similar: LayerNorm,
    /// z update.
    pub sparse: Msgm,
    /// β estimate.
    pub similar: Msgm,
    /// Aggregation of v and β.
    pub aggregate: Msgm,
    /// Feed-forward refinement.
    pub refine: Msgm,
    pub esam: Esam,
}

/// Intermediate values of one stage, for inspection.
#[derive(Clone, Debug)]
pub struct StageParts<V> {
    pub z: V,
    pub beta: V,
    pub v_hat: V,
    pub v: V,
    pub alpha_hat: V,
    pub alpha_next: V,
}

impl SsRem {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        msgm: &MsgmConfig,
        esam: &EsamConfig,
        mode: AttentionMode,
        rng: &mut R,
    ) -> Self {
        let c = msgm.channels;
        SsRem {
            norm_sparse: LayerNorm::new(store, &format!("{name}.norm1"), c),
            norm_similar: LayerNorm::new(store, &format!("{name}.norm2"), c),
            sparse: Msgm::new(store, &format!("{name}.msgm1"), msgm, rng),
            similar: Msgm::new(store, &format!("{name}.msgm2"), msgm, rng),
            esam: Esam::new(store, &format!("{name}.esam"), esam, mode, rng),
            aggregate: Msgm::new(store, &format!("{name}.msgm3"), msgm, rng),
            refine: Msgm::new(store, &format!("{name}.msgm4"), msgm, rng),
        }
    }

    pub fn forward_parts<G: Graph>(&self, g: &mut G, alpha: &G::V, f_y: &G::V) -> StageParts<G::V> {
        let n1 = self.norm_sparse.forward(g, alpha);
        let z = self.sparse.forward(g, &n1);
        let n2 = self.norm_similar.forward(g, alpha);
        let beta = self.similar.forward(g, &n2);
        let za = g.add(&z, alpha);
        let v_hat = g.add(&za, f_y);
        let attn = self.esam.forward(g, &v_hat);
        let v = g.add(&attn, &v_hat);
        let vb = g.add(&v, &beta);
        let agg = self.aggregate.forward(g, &vb);
        let alpha_hat = g.add(&agg, &beta);
        let ff = self.refine.forward(g, &alpha_hat);
        let alpha_next = g.add(&ff, &alpha_hat);
        StageParts {
            z,
            beta,
            v_hat,
            v,
            alpha_hat,
            alpha_next,
        }
    }

    pub fn forward<G: Graph>(&self, g: &mut G, alpha: &G::V, f_y: &G::V) -> G::V {
        self.forward_parts(g, alpha, f_y).alpha_next
    }

    pub fn apply(
        &self,
        params: &ParamStore,
        alpha: &Array3<f64>,
        f_y: &Array3<f64>,
    ) -> Result<Array3<f64>> {
        if alpha.dim() != f_y.dim() {
            return Err(Error::invalid(format!(
                "stage inputs differ in shape: {:?} vs {:?}",
                alpha.dim(),
                f_y.dim()
            )));
        }
        super::check_channels(alpha, self.sparse.config.channels, "ss-rem")?;
        let mut g = Eager::new(params);
        let a = g.input(to_tensor(alpha));
        let f = g.input(to_tensor(f_y));
        let out = self.forward(&mut g, &a, &f);
        Ok(to_array3((*out).clone()))
    }
}
