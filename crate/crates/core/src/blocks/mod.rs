//! Learnable building blocks of the unfolded network.

pub mod esam;
pub mod layers;
pub mod moe;
pub mod msgm;
pub mod stage;

use std::rc::Rc;

use ndarray::{Array3, Ix3};

pub use esam::{block_merge, block_partition, sparse_downsample, AttentionMode, Esam, EsamConfig};
pub use layers::{Conv2d, LayerNorm};
pub use moe::{MoeFs, MoeFsConfig};
pub use msgm::{Msgm, MsgmConfig};
pub use stage::{SsRem, StageParts};

use crate::error::{Error, Result};
use crate::nn::{Eager, Graph, ParamStore, Tensor};

pub(crate) fn to_tensor(x: &Array3<f64>) -> Tensor {
    x.as_standard_layout().into_owned().into_dyn()
}

pub(crate) fn to_array3(t: Tensor) -> Array3<f64> {
    t.into_dimensionality::<Ix3>().expect("C×H×W tensor")
}

pub(crate) fn check_channels(x: &Array3<f64>, expected: usize, what: &str) -> Result<()> {
    let (c, h, w) = x.dim();
    if c != expected {
        return Err(Error::invalid(format!(
            "{what} expects {expected} channels, got {c}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid(format!("{what} input has empty spatial size")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what} input has non-finite entries")));
    }
    Ok(())
}

pub(crate) fn run_eager<F>(params: &ParamStore, x: &Array3<f64>, f: F) -> Array3<f64>
where
    F: FnOnce(&mut Eager<'_>, &Rc<Tensor>) -> Rc<Tensor>,
{
    let mut g = Eager::new(params);
    let v = g.input(to_tensor(x));
    let out = f(&mut g, &v);
    to_array3((*out).clone())
}
