//! Kernelized linear attention with the `elu(x) + 1` feature map.
//!
//! Replaces the softmax in class attention so cost scales linearly in
//! the token count. Reuses the q/k/v/o projections of
//! [`MultiHeadAttention`]; only the score computation differs:
//!
//! `out_i = sum_j phi(q_i).phi(k_j) v_j / sum_j phi(q_i).phi(k_j)`
//!
//! The feature map is strictly positive, so the denominator never
//! vanishes.

use ndarray::{s, Array1, Array2};

use super::act::{elu1, elu1_deriv};
use super::attention::MultiHeadAttention;

pub struct LinAttnCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    phi_q: Array2<f64>,
    phi_k: Array2<f64>,
    ctx: Array2<f64>,
}

impl MultiHeadAttention {
    pub fn forward_linear(&self, x: &Array2<f64>) -> (Array2<f64>, LinAttnCache) {
        let t = x.nrows();
        let c = self.channels();
        let dh = c / self.heads;

        let q = self.wq.forward(x);
        let k = self.wk.forward(x);
        let v = self.wv.forward(x);
        let phi_q = q.mapv(elu1);
        let phi_k = k.mapv(elu1);

        let mut ctx = Array2::zeros((t, c));
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let pq = phi_q.slice(cols);
            let pk = phi_k.slice(cols);
            let vh = v.slice(cols);

            // kv summary (dh x dh) and key sum (dh)
            let smat = pk.t().dot(&vh);
            let z: Array1<f64> = pk.sum_axis(ndarray::Axis(0));
            for i in 0..t {
                let qi = pq.row(i);
                let denom = qi.dot(&z);
                let num = smat.t().dot(&qi);
                ctx.slice_mut(s![i, h * dh..(h + 1) * dh])
                    .assign(&num.mapv(|n| n / denom));
            }
        }

        let y = self.wo.forward(&ctx);
        let cache = LinAttnCache { x: x.clone(), q, k, v, phi_q, phi_k, ctx };
        (y, cache)
    }

    pub fn backward_linear(&mut self, cache: &LinAttnCache, gy: &Array2<f64>) -> Array2<f64> {
        let t = cache.x.nrows();
        let c = self.channels();
        let dh = c / self.heads;

        let gctx = self.wo.backward(&cache.ctx, gy);

        let mut gq = Array2::zeros((t, c));
        let mut gk = Array2::zeros((t, c));
        let mut gv = Array2::zeros((t, c));

        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let pq = cache.phi_q.slice(cols);
            let pk = cache.phi_k.slice(cols);
            let vh = cache.v.slice(cols);
            let gctx_h = gctx.slice(cols);

            let smat = pk.t().dot(&vh);
            let z: Array1<f64> = pk.sum_axis(ndarray::Axis(0));

            let mut gphi_q = Array2::zeros((t, dh));
            let mut gsmat = Array2::zeros((dh, dh));
            let mut gz = Array1::zeros(dh);
            for i in 0..t {
                let qi = pq.row(i);
                let go = gctx_h.row(i);
                let denom = qi.dot(&z);
                let num = smat.t().dot(&qi);

                // out = num / denom
                let gnum = go.mapv(|g| g / denom);
                let gdenom = -go.dot(&num) / (denom * denom);

                gphi_q
                    .row_mut(i)
                    .assign(&(smat.dot(&gnum) + gz_term(&z, gdenom)));
                for a in 0..dh {
                    for d in 0..dh {
                        gsmat[(a, d)] += qi[a] * gnum[d];
                    }
                }
                gz.scaled_add(gdenom, &qi);
            }

            // smat = phi_k^T v, z = sum_j phi_k_j
            let gphi_k = vh.dot(&gsmat.t()) + broadcast_rows(&gz, t);
            gv.slice_mut(cols).assign(&pk.dot(&gsmat));

            // kernel derivative back to raw q/k
            let qraw = cache.q.slice(cols);
            let kraw = cache.k.slice(cols);
            gq.slice_mut(cols)
                .assign(&(&gphi_q * &qraw.mapv(elu1_deriv)));
            gk.slice_mut(cols)
                .assign(&(&gphi_k * &kraw.mapv(elu1_deriv)));
        }

        let mut gx = self.wq.backward(&cache.x, &gq);
        gx += &self.wk.backward(&cache.x, &gk);
        gx += &self.wv.backward(&cache.x, &gv);
        gx
    }
}

fn gz_term(z: &Array1<f64>, gdenom: f64) -> Array1<f64> {
    z.mapv(|v| v * gdenom)
}

fn broadcast_rows(row: &Array1<f64>, t: usize) -> Array2<f64> {
    let mut out = Array2::zeros((t, row.len()));
    for i in 0..t {
        out.row_mut(i).assign(row);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init::component_rng;

    fn rand_tokens(seed: u64, t: usize, c: usize) -> Array2<f64> {
        let mut rng = component_rng(seed, "lintok");
        Array2::from_shape_fn((t, c), |_| rand::Rng::random_range(&mut rng, -1.0..1.0))
    }

    #[test]
    fn single_token_matches_softmax_variant() {
        // with one token both attentions return wo(v)
        let mut rng = component_rng(21, "lin");
        let attn = MultiHeadAttention::new(&mut rng, 6, 2);
        let x = rand_tokens(22, 1, 6);
        let (ylin, _) = attn.forward_linear(&x);
        let (ysoft, _) = attn.forward(&x, None, None);
        for (a, b) in ylin.iter().zip(ysoft.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn rows_are_convex_mixes_of_values() {
        // strictly positive kernel: outputs stay inside the value hull
        let mut rng = component_rng(23, "lin");
        let attn = MultiHeadAttention::new(&mut rng, 4, 1);
        let x = rand_tokens(24, 5, 4);
        let (_, cache) = attn.forward_linear(&x);
        let v = &cache.v;
        let ctx = &cache.ctx;
        for d in 0..4 {
            let lo = v.column(d).iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.column(d).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..5 {
                assert!(ctx[(i, d)] >= lo - 1e-9 && ctx[(i, d)] <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = component_rng(25, "lin");
        let mut attn = MultiHeadAttention::new(&mut rng, 6, 2);
        let x = rand_tokens(26, 4, 6);
        let coeff = rand_tokens(27, 4, 6);

        let loss = |attn: &MultiHeadAttention, x: &Array2<f64>| {
            (attn.forward_linear(x).0 * &coeff).sum()
        };

        let (_, cache) = attn.forward_linear(&x);
        let gx = attn.backward_linear(&cache, &coeff);

        let h = 1e-6;
        for i in 0..4 {
            for j in 0..6 {
                let mut xp = x.clone();
                xp[(i, j)] += h;
                let mut xm = x.clone();
                xm[(i, j)] -= h;
                let fd = (loss(&attn, &xp) - loss(&attn, &xm)) / (2.0 * h);
                assert!(
                    (gx[(i, j)] - fd).abs() < 1e-6,
                    "gx({i},{j}) {} vs {fd}",
                    gx[(i, j)]
                );
            }
        }
        // parameter spot checks across all four projections
        fn bump(a: &mut MultiHeadAttention, which: usize, idx: (usize, usize), delta: f64) {
            let lin = match which {
                0 => &mut a.wq,
                1 => &mut a.wk,
                2 => &mut a.wv,
                _ => &mut a.wo,
            };
            lin.w.value[[idx.0, idx.1]] += delta;
        }
        for (which, g, idx) in [
            (0, attn.wq.w.grad[[1, 2]], (1, 2)),
            (1, attn.wk.w.grad[[0, 3]], (0, 3)),
            (2, attn.wv.w.grad[[2, 0]], (2, 0)),
            (3, attn.wo.w.grad[[3, 1]], (3, 1)),
        ] {
            let mut ap = attn.clone();
            let mut am = attn.clone();
            bump(&mut ap, which, idx, h);
            bump(&mut am, which, idx, -h);
            let fd = (loss(&ap, &x) - loss(&am, &x)) / (2.0 * h);
            assert!((g - fd).abs() < 1e-6, "proj {which} grad {g} vs {fd}");
        }
    }
}
