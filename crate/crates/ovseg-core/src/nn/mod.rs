//! Hand-rolled neural network building blocks.
//!
//! Everything computes in `f64` with explicit forward caches and
//! manual backward passes; there is no tape or autodiff. Each layer's
//! backward accumulates into parameter `grad` buffers and returns the
//! input gradient, so callers compose passes by chaining returns.

pub mod act;
pub mod attention;
pub mod conv;
pub mod init;
pub mod linattn;
pub mod linear;
pub mod mlp;
pub mod norm;
pub mod optim;
pub mod param;

pub use act::{elu1, elu1_deriv, gelu, gelu_backward, gelu_map, softmax_row};

/// Relative error between an analytic and a numeric derivative,
/// floored to avoid division blowups near zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
pub use attention::{AttnCache, MultiHeadAttention};
pub use conv::Conv2d;
pub use init::component_rng;
pub use linattn::LinAttnCache;
pub use linear::Linear;
pub use mlp::{Mlp, MlpCache};
pub use norm::{LayerNorm, LnCache};
pub use optim::{AdamW, AdamWConfig};
pub use param::{join, Param, ParamKind, ParamVisitor, Visit};
