//! Fully connected layer over token matrices, shape `(tokens, features)`.

use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use super::init;
use super::param::{join, Param, ParamKind, ParamVisitor, Visit};

#[derive(Debug, Clone)]
pub struct Linear {
    /// Weight matrix, shape `[in, out]`.
    pub w: Param,
    /// Bias, shape `[out]`.
    pub b: Param,
    kind: ParamKind,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        Self {
            w: Param::from2(init::xavier2(rng, d_in, d_out)),
            b: Param::from1(init::zeros1(d_out)),
            kind: ParamKind::Trainable,
        }
    }

    /// Near-identity square layer standing in for a pretrained block.
    pub fn near_identity(rng: &mut ChaCha8Rng, n: usize, eps: f64) -> Self {
        Self {
            w: Param::from2(init::identity_noise(rng, n, eps)),
            b: Param::from1(init::zeros1(n)),
            kind: ParamKind::Trainable,
        }
    }

    /// A layer whose weights are architectural constants.
    pub fn fixed(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        Self {
            w: Param::from2(init::xavier2(rng, d_in, d_out)),
            b: Param::from1(init::zeros1(d_out)),
            kind: ParamKind::Fixed,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.v2()) + &self.b.v1()
    }

    /// Accumulates parameter gradients and returns `dloss/dx`.
    /// `x` must be the same activation the forward pass saw.
    pub fn backward(&mut self, x: &Array2<f64>, gy: &Array2<f64>) -> Array2<f64> {
        let gw = x.t().dot(gy);
        let gb = gy.sum_axis(Axis(0));
        self.w.grad += &gw.into_dyn();
        self.b.grad += &gb.into_dyn();
        gy.dot(&self.w.v2().t())
    }

    /// Forward for a single vector.
    pub fn forward1(&self, x: &Array1<f64>) -> Array1<f64> {
        self.w.v2().t().dot(x) + &self.b.v1()
    }
}

impl Visit for Linear {
    fn visit(&mut self, path: &str, f: &mut ParamVisitor) {
        f(&join(path, "w"), self.kind, &mut self.w);
        f(&join(path, "b"), self.kind, &mut self.b);
    }
}
