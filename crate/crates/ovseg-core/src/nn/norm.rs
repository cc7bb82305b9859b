//! Layer normalization over the feature axis of a token matrix.

use ndarray::{Array1, Array2, Axis};

use super::init;
use super::param::{join, Param, ParamKind, ParamVisitor, Visit};

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

pub struct LnCache {
    /// Normalized input before the affine transform, shape `(tokens, c)`.
    xhat: Array2<f64>,
    /// Per-token `1 / sqrt(var + eps)`.
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Param::from1(Array1::ones(c)),
            beta: Param::from1(init::zeros1(c)),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LnCache) {
        let c = x.ncols() as f64;
        let mean = x.mean_axis(Axis(1)).expect("non-empty rows");
        let mut xhat = x.clone();
        for (mut row, &m) in xhat.rows_mut().into_iter().zip(mean.iter()) {
            row.mapv_inplace(|v| v - m);
        }
        let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / c;
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        for (mut row, &s) in xhat.rows_mut().into_iter().zip(inv_std.iter()) {
            row.mapv_inplace(|v| v * s);
        }
        let mut y = xhat.clone();
        let g = self.gamma.v1();
        let b = self.beta.v1();
        for mut row in y.rows_mut() {
            row.zip_mut_with(&g, |v, &gv| *v *= gv);
            row.zip_mut_with(&b, |v, &bv| *v += bv);
        }
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LnCache, gy: &Array2<f64>) -> Array2<f64> {
        let c = gy.ncols() as f64;
        let g = self.gamma.v1().to_owned();

        // parameter grads
        let mut ggamma = Array1::zeros(gy.ncols());
        let mut gbeta = Array1::zeros(gy.ncols());
        for (gy_row, xh_row) in gy.rows().into_iter().zip(cache.xhat.rows()) {
            for j in 0..gy.ncols() {
                ggamma[j] += gy_row[j] * xh_row[j];
                gbeta[j] += gy_row[j];
            }
        }
        self.gamma.grad += &ggamma.into_dyn();
        self.beta.grad += &gbeta.into_dyn();

        // input grad, per token:
        // gx = inv_std * (gh - mean(gh) - xhat * mean(gh * xhat)),  gh = gy * gamma
        let mut gx = Array2::zeros(gy.raw_dim());
        for (t, (gy_row, xh_row)) in gy.rows().into_iter().zip(cache.xhat.rows()).enumerate() {
            let gh: Vec<f64> = (0..gy.ncols()).map(|j| gy_row[j] * g[j]).collect();
            let mean_gh: f64 = gh.iter().sum::<f64>() / c;
            let mean_gh_xhat: f64 =
                gh.iter().zip(xh_row.iter()).map(|(a, b)| a * b).sum::<f64>() / c;
            let s = cache.inv_std[t];
            for j in 0..gy.ncols() {
                gx[(t, j)] = s * (gh[j] - mean_gh - xh_row[j] * mean_gh_xhat);
            }
        }
        gx
    }
}

impl Visit for LayerNorm {
    fn visit(&mut self, path: &str, f: &mut ParamVisitor) {
        f(&join(path, "gamma"), ParamKind::Trainable, &mut self.gamma);
        f(&join(path, "beta"), ParamKind::Trainable, &mut self.beta);
    }
}
