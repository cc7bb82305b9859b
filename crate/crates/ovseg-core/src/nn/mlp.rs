//! Two-layer feedforward block (expand, GELU, contract).

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use super::act::{gelu_backward, gelu_map};
use super::linear::Linear;
use super::param::{join, ParamVisitor, Visit};

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct MlpCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    post: Array2<f64>,
}

impl Mlp {
    pub fn new(rng: &mut ChaCha8Rng, c: usize, hidden: usize) -> Self {
        Self { fc1: Linear::new(rng, c, hidden), fc2: Linear::new(rng, hidden, c) }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let pre = self.fc1.forward(x);
        let post = gelu_map(&pre);
        let y = self.fc2.forward(&post);
        (y, MlpCache { x: x.clone(), pre, post })
    }

    pub fn backward(&mut self, cache: &MlpCache, gy: &Array2<f64>) -> Array2<f64> {
        let gpost = self.fc2.backward(&cache.post, gy);
        let gpre = gelu_backward(&cache.pre, &gpost);
        self.fc1.backward(&cache.x, &gpre)
    }
}

impl Visit for Mlp {
    fn visit(&mut self, path: &str, f: &mut ParamVisitor) {
        self.fc1.visit(&join(path, "fc1"), f);
        self.fc2.visit(&join(path, "fc2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init::component_rng;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = component_rng(31, "mlp");
        let mut mlp = Mlp::new(&mut rng, 4, 8);
        let x = Array2::from_shape_fn((3, 4), |(i, j)| ((i * 4 + j) as f64 * 0.37).sin());
        let coeff = Array2::from_shape_fn((3, 4), |(i, j)| ((i + j) as f64 * 0.21).cos());

        let (_, cache) = mlp.forward(&x);
        let gx = mlp.backward(&cache, &coeff);

        let h = 1e-6;
        for i in 0..3 {
            for j in 0..4 {
                let mut xp = x.clone();
                xp[(i, j)] += h;
                let mut xm = x.clone();
                xm[(i, j)] -= h;
                let fd = ((mlp.forward(&xp).0.clone() * &coeff).sum()
                    - (mlp.forward(&xm).0.clone() * &coeff).sum())
                    / (2.0 * h);
                assert!((gx[(i, j)] - fd).abs() < 1e-6);
            }
        }
        // weight grad spot check
        let g = mlp.fc1.w.grad[[2, 5]];
        let mut mp = mlp.clone();
        mp.fc1.w.value[[2, 5]] += h;
        let mut mm = mlp.clone();
        mm.fc1.w.value[[2, 5]] -= h;
        let fd = ((mp.forward(&x).0 * &coeff).sum() - (mm.forward(&x).0 * &coeff).sum())
            / (2.0 * h);
        assert!((g - fd).abs() < 1e-6);
    }
}
