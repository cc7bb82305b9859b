//! Elementwise activations and the row softmax, with analytic derivatives.

use ndarray::{Array1, Array2, ArrayView1};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU. Smooth everywhere, which keeps central
/// finite-difference checks well behaved.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu_map(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(gelu)
}

/// Backward through an elementwise GELU: `gy * gelu'(x)`.
pub fn gelu_backward(x: &Array2<f64>, gy: &Array2<f64>) -> Array2<f64> {
    let mut gx = gy.clone();
    gx.zip_mut_with(x, |g, &xv| *g *= gelu_deriv(xv));
    gx
}

/// `elu(x) + 1`, the positive feature map of kernelized linear attention.
pub fn elu1(x: f64) -> f64 {
    if x >= 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

pub fn elu1_deriv(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Numerically stable softmax of a single row.
pub fn softmax_row(x: ArrayView1<f64>) -> Array1<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = x.mapv(|v| (v - max).exp());
    let sum: f64 = out.sum();
    out.mapv_inplace(|v| v / sum);
    out
}

/// Backward through a row softmax given its output `y`:
/// `gx_i = y_i * (gy_i - sum_j gy_j y_j)`.
pub fn softmax_row_backward(y: ArrayView1<f64>, gy: ArrayView1<f64>) -> Array1<f64> {
    let dot: f64 = y.iter().zip(gy.iter()).map(|(a, b)| a * b).sum();
    let mut gx = Array1::zeros(y.len());
    for i in 0..y.len() {
        gx[i] = y[i] * (gy[i] - dot);
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn gelu_derivative_matches_fd() {
        for &x in &[-2.5, -0.3, 0.0, 0.7, 3.1] {
            let a = gelu_deriv(x);
            let n = fd(gelu, x);
            assert!((a - n).abs() < 1e-7, "x={x}: {a} vs {n}");
        }
    }

    #[test]
    fn elu1_derivative_matches_fd() {
        for &x in &[-1.5, -0.01, 0.02, 2.0] {
            let a = elu1_deriv(x);
            let n = fd(elu1, x);
            assert!((a - n).abs() < 1e-6, "x={x}: {a} vs {n}");
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let y = softmax_row(array![1.0, 2.0, 3.0].view());
        assert!((y.sum() - 1.0).abs() < 1e-12);
        assert!(y[2] > y[1] && y[1] > y[0]);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let y = softmax_row(array![0.5, 0.5, 0.5, 0.5].view());
        for &v in y.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }
}
