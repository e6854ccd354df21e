//! Minimal tensor graph used by the network: a handful of image operators,
//! each with an exact adjoint, evaluated eagerly or recorded for
//! reverse-mode differentiation.

pub mod attention;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod tape;

pub use attention::BlockGrid;
pub use graph::{AttentionProbe, Eager, Graph, Trace};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};

/// Dense real tensor; feature maps are `C×H×W`, conv kernels `O×I×k×k`.
pub type Tensor = ndarray::ArrayD<f64>;
