//! Multi-head softmax attention over a token matrix.
//!
//! Shared by the windowed spatial blocks (which add a relative-position
//! bias and, when shifted, an additive mask) and the per-pixel class
//! blocks (which use neither).

use ndarray::{s, Array2, Array3};
use rand_chacha::ChaCha8Rng;

use super::act::{softmax_row, softmax_row_backward};
use super::linear::Linear;
use super::param::{join, ParamVisitor, Visit};

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

pub struct AttnCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Softmax outputs per head, each `(tokens, tokens)`.
    probs: Vec<Array2<f64>>,
    /// Concatenated head contexts, the input to `wo`.
    ctx: Array2<f64>,
}

impl MultiHeadAttention {
    pub fn new(rng: &mut ChaCha8Rng, c: usize, heads: usize) -> Self {
        assert!(heads >= 1 && c % heads == 0, "channels must split across heads");
        Self {
            wq: Linear::new(rng, c, c),
            wk: Linear::new(rng, c, c),
            wv: Linear::new(rng, c, c),
            wo: Linear::new(rng, c, c),
            heads,
        }
    }

    pub fn channels(&self) -> usize {
        self.wq.d_in()
    }

    /// `bias` is a per-head additive score term `(heads, T, T)`;
    /// `mask` an additive term shared by all heads `(T, T)`.
    pub fn forward(
        &self,
        x: &Array2<f64>,
        bias: Option<&Array3<f64>>,
        mask: Option<&Array2<f64>>,
    ) -> (Array2<f64>, AttnCache) {
        let t = x.nrows();
        let c = self.channels();
        let dh = c / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let q = self.wq.forward(x);
        let k = self.wk.forward(x);
        let v = self.wv.forward(x);

        let mut ctx = Array2::zeros((t, c));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);

            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|s| s * scale);
            if let Some(b) = bias {
                scores += &b.slice(s![h, .., ..]);
            }
            if let Some(m) = mask {
                scores += m;
            }

            let mut p = Array2::zeros((t, t));
            for (i, row) in scores.rows().into_iter().enumerate() {
                p.row_mut(i).assign(&softmax_row(row));
            }
            ctx.slice_mut(cols).assign(&p.dot(&vh));
            probs.push(p);
        }

        let y = self.wo.forward(&ctx);
        let cache = AttnCache { x: x.clone(), q, k, v, probs, ctx };
        (y, cache)
    }

    /// Returns `dloss/dx` and, when a bias was supplied, `dloss/dbias`.
    pub fn backward(
        &mut self,
        cache: &AttnCache,
        gy: &Array2<f64>,
        want_bias_grad: bool,
    ) -> (Array2<f64>, Option<Array3<f64>>) {
        let t = cache.x.nrows();
        let c = self.channels();
        let dh = c / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let gctx = self.wo.backward(&cache.ctx, gy);

        let mut gq = Array2::zeros((t, c));
        let mut gk = Array2::zeros((t, c));
        let mut gv = Array2::zeros((t, c));
        let mut gbias = want_bias_grad.then(|| Array3::zeros((self.heads, t, t)));

        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = cache.q.slice(cols);
            let kh = cache.k.slice(cols);
            let vh = cache.v.slice(cols);
            let p = &cache.probs[h];
            let gctx_h = gctx.slice(cols);

            gv.slice_mut(cols).assign(&p.t().dot(&gctx_h));
            let gp = gctx_h.dot(&vh.t());

            let mut gscores = Array2::zeros((t, t));
            for i in 0..t {
                gscores
                    .row_mut(i)
                    .assign(&softmax_row_backward(p.row(i), gp.row(i)));
            }
            if let Some(gb) = gbias.as_mut() {
                gb.slice_mut(s![h, .., ..]).assign(&gscores);
            }

            gq.slice_mut(cols).assign(&gscores.dot(&kh).mapv(|v| v * scale));
            gk.slice_mut(cols)
                .assign(&gscores.t().dot(&qh).mapv(|v| v * scale));
        }

        let mut gx = self.wq.backward(&cache.x, &gq);
        gx += &self.wk.backward(&cache.x, &gk);
        gx += &self.wv.backward(&cache.x, &gv);
        (gx, gbias)
    }
}

impl Visit for MultiHeadAttention {
    fn visit(&mut self, path: &str, f: &mut ParamVisitor) {
        self.wq.visit(&join(path, "wq"), f);
        self.wk.visit(&join(path, "wk"), f);
        self.wv.visit(&join(path, "wv"), f);
        self.wo.visit(&join(path, "wo"), f);
    }
}

/// Dense single-pass attention computed with scalar loops. Test oracle:
/// no head slicing, no matmul reuse, just the definition.
pub fn dense_attention_oracle(
    x: &Array2<f64>,
    wq: &Array2<f64>,
    bq: &[f64],
    wk: &Array2<f64>,
    bk: &[f64],
    wv: &Array2<f64>,
    bv: &[f64],
    wo: &Array2<f64>,
    bo: &[f64],
    heads: usize,
    bias: Option<&Array3<f64>>,
    mask: Option<&Array2<f64>>,
) -> Array2<f64> {
    let t = x.nrows();
    let c = x.ncols();
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let project = |w: &Array2<f64>, b: &[f64]| {
        let mut out = Array2::zeros((t, c));
        for i in 0..t {
            for o in 0..c {
                let mut acc = b[o];
                for j in 0..c {
                    acc += x[(i, j)] * w[(j, o)];
                }
                out[(i, o)] = acc;
            }
        }
        out
    };
    let q = project(wq, bq);
    let k = project(wk, bk);
    let v = project(wv, bv);

    let mut ctx = Array2::zeros((t, c));
    for h in 0..heads {
        for i in 0..t {
            let mut scores = vec![0.0; t];
            for (j, sc) in scores.iter_mut().enumerate() {
                let mut dot = 0.0;
                for d in 0..dh {
                    dot += q[(i, h * dh + d)] * k[(j, h * dh + d)];
                }
                *sc = dot * scale;
                if let Some(b) = bias {
                    *sc += b[(h, i, j)];
                }
                if let Some(m) = mask {
                    *sc += m[(i, j)];
                }
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for d in 0..dh {
                let mut acc = 0.0;
                for j in 0..t {
                    acc += exps[j] / sum * v[(j, h * dh + d)];
                }
                ctx[(i, h * dh + d)] = acc;
            }
        }
    }

    let mut y = Array2::zeros((t, c));
    for i in 0..t {
        for o in 0..c {
            let mut acc = bo[o];
            for j in 0..c {
                acc += ctx[(i, j)] * wo[(j, o)];
            }
            y[(i, o)] = acc;
        }
    }
    y
}
