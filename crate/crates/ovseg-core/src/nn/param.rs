//! Named parameter storage shared by every trainable component.
//!
//! Parameters live as dynamic-dimensional `f64` arrays with a gradient
//! buffer of the same shape. Components expose their tensors through
//! [`visit`](Visit::visit) so the optimizer, the checkpoint writer, and
//! the gradient checker can walk the whole model without knowing its
//! internals.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView1, ArrayView2, ArrayView4};

/// Whether a tensor ever receives optimizer updates.
///
/// `Fixed` tensors are architectural buffers (seeded random projections,
/// token tables): they serialize with the model but are never stepped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Fixed,
}

/// A value tensor paired with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn from1(value: Array1<f64>) -> Self {
        Self::new(value.into_dyn())
    }

    pub fn from2(value: Array2<f64>) -> Self {
        Self::new(value.into_dyn())
    }

    pub fn from4(value: Array4<f64>) -> Self {
        Self::new(value.into_dyn())
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn v1(&self) -> ArrayView1<'_, f64> {
        self.value.view().into_dimensionality().expect("param is 1-d")
    }

    pub fn v2(&self) -> ArrayView2<'_, f64> {
        self.value.view().into_dimensionality().expect("param is 2-d")
    }

    pub fn v4(&self) -> ArrayView4<'_, f64> {
        self.value.view().into_dimensionality().expect("param is 4-d")
    }
}

/// Callback invoked once per tensor during a parameter walk.
pub type ParamVisitor<'a> = dyn FnMut(&str, ParamKind, &mut Param) + 'a;

/// Walk every tensor of a component, prefixing names with `path`.
pub trait Visit {
    fn visit(&mut self, path: &str, f: &mut ParamVisitor);
}

/// Join a path prefix with a field name.
pub fn join(path: &str, name: &str) -> String {
    if path.is_empty() {
        name.to_string()
    } else {
        format!("{path}.{name}")
    }
}
