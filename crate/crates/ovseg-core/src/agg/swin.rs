//! Windowed spatial attention block (Swin style) over one class slice.
//!
//! Pre-norm transformer block on non-overlapping `window x window`
//! token tiles: `y = x + attn(ln1(x))`, `z = y + mlp(ln2(y))`. The
//! attention adds a learned relative-position bias shared across
//! windows. A shifted instance cyclically rolls the grid by half a
//! window first and masks attention between cells that were not
//! adjacent before the roll. Grids that do not divide the window are
//! zero-padded and cropped after.

use ndarray::{s, Array2, Array3};
use rand_chacha::ChaCha8Rng;

use crate::nn::norm::LnCache;
use crate::nn::{
    join, AttnCache, LayerNorm, Mlp, MlpCache, MultiHeadAttention, Param, ParamKind,
    ParamVisitor, Visit,
};

const MASK_OFF: f64 = -1e9;

#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    /// Relative-position bias table, `[(2w-1)^2, heads]`, zero-init.
    pub rel_bias: Param,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub window: usize,
    /// Cyclic roll applied before windowing; 0 for the unshifted block.
    pub shift: usize,
}

struct WindowCache {
    ln1: LnCache,
    attn: AttnCache,
    ln2: LnCache,
    mlp: MlpCache,
}

pub struct SwinCache {
    h0: usize,
    w0: usize,
    hp: usize,
    wp: usize,
    windows: Vec<WindowCache>,
}

impl SwinBlock {
    pub fn new(rng: &mut ChaCha8Rng, c: usize, heads: usize, window: usize, shifted: bool, mlp_ratio: usize) -> Self {
        let side = 2 * window - 1;
        Self {
            ln1: LayerNorm::new(c),
            attn: MultiHeadAttention::new(rng, c, heads),
            rel_bias: Param::from2(Array2::zeros((side * side, heads))),
            ln2: LayerNorm::new(c),
            mlp: Mlp::new(rng, c, c * mlp_ratio),
            window,
            shift: if shifted { window / 2 } else { 0 },
        }
    }

    fn tokens(&self) -> usize {
        self.window * self.window
    }

    /// Flat relative-position index for in-window token pair (i, j).
    fn rel_index(&self, i: usize, j: usize) -> usize {
        let w = self.window;
        let (iy, ix) = (i / w, i % w);
        let (jy, jx) = (j / w, j % w);
        let dy = iy as isize - jy as isize + (w as isize - 1);
        let dx = ix as isize - jx as isize + (w as isize - 1);
        (dy as usize) * (2 * w - 1) + dx as usize
    }

    /// Gathers the bias table into per-head `(heads, T, T)` scores.
    pub fn gather_bias(&self) -> Array3<f64> {
        let t = self.tokens();
        let heads = self.attn.heads;
        let table = self.rel_bias.v2();
        Array3::from_shape_fn((heads, t, t), |(h, i, j)| table[(self.rel_index(i, j), h)])
    }

    /// Scatters a per-head bias gradient back into the table.
    fn scatter_bias_grad(&mut self, gbias: &Array3<f64>) {
        let t = self.tokens();
        for h in 0..self.attn.heads {
            for i in 0..t {
                for j in 0..t {
                    let idx = self.rel_index(i, j);
                    self.rel_bias.grad[[idx, h]] += gbias[(h, i, j)];
                }
            }
        }
    }

    /// Region ids on the rolled, padded grid; windows spanning several
    /// regions get cross-region attention masked.
    fn region_masks(&self, hp: usize, wp: usize) -> Option<Vec<Option<Array2<f64>>>> {
        if self.shift == 0 {
            return None;
        }
        let w = self.window;
        let s = self.shift;
        let region = |extent: usize, v: usize| -> usize {
            if v < extent - w {
                0
            } else if v < extent - s {
                1
            } else {
                2
            }
        };
        let ids = Array2::from_shape_fn((hp, wp), |(y, x)| region(hp, y) * 3 + region(wp, x));
        let (nh, nw) = (hp / w, wp / w);
        let t = w * w;
        let mut masks = Vec::with_capacity(nh * nw);
        for wy in 0..nh {
            for wx in 0..nw {
                let win = ids.slice(s![wy * w..(wy + 1) * w, wx * w..(wx + 1) * w]);
                let flat: Vec<usize> = win.iter().cloned().collect();
                let uniform = flat.iter().all(|&r| r == flat[0]);
                if uniform {
                    masks.push(None);
                    continue;
                }
                let mask = Array2::from_shape_fn((t, t), |(i, j)| {
                    if flat[i] == flat[j] {
                        0.0
                    } else {
                        MASK_OFF
                    }
                });
                masks.push(Some(mask));
            }
        }
        Some(masks)
    }

    pub fn forward(&self, slice: &Array3<f64>) -> (Array3<f64>, SwinCache) {
        let (h0, w0, c) = dims3(slice);
        let w = self.window;
        let hp = h0.div_ceil(w) * w;
        let wp = w0.div_ceil(w) * w;

        let mut grid = Array3::zeros((hp, wp, c));
        grid.slice_mut(s![0..h0, 0..w0, ..]).assign(slice);
        if self.shift > 0 {
            grid = roll3(&grid, self.shift as isize, self.shift as isize);
        }

        let bias = self.gather_bias();
        let masks = self.region_masks(hp, wp);
        let (nh, nw) = (hp / w, wp / w);
        let t = w * w;

        let mut out = Array3::zeros((hp, wp, c));
        let mut windows = Vec::with_capacity(nh * nw);
        for wy in 0..nh {
            for wx in 0..nw {
                let mut x = Array2::zeros((t, c));
                for dy in 0..w {
                    for dx in 0..w {
                        x.row_mut(dy * w + dx)
                            .assign(&grid.slice(s![wy * w + dy, wx * w + dx, ..]));
                    }
                }
                let mask = masks
                    .as_ref()
                    .and_then(|m| m[wy * nw + wx].as_ref());

                let (xn, ln1) = self.ln1.forward(&x);
                let (a, attn) = self.attn.forward(&xn, Some(&bias), mask);
                let y = &x + &a;
                let (yn, ln2) = self.ln2.forward(&y);
                let (mo, mlp) = self.mlp.forward(&yn);
                let z = &y + &mo;

                for dy in 0..w {
                    for dx in 0..w {
                        out.slice_mut(s![wy * w + dy, wx * w + dx, ..])
                            .assign(&z.row(dy * w + dx));
                    }
                }
                windows.push(WindowCache { ln1, attn, ln2, mlp });
            }
        }

        if self.shift > 0 {
            out = roll3(&out, -(self.shift as isize), -(self.shift as isize));
        }
        let cropped = out.slice(s![0..h0, 0..w0, ..]).to_owned();
        (cropped, SwinCache { h0, w0, hp, wp, windows })
    }

    pub fn backward(&mut self, cache: &SwinCache, gout: &Array3<f64>) -> Array3<f64> {
        let (h0, w0, hp, wp) = (cache.h0, cache.w0, cache.hp, cache.wp);
        let c = gout.shape()[2];
        let w = self.window;
        let t = w * w;
        let (nh, nw) = (hp / w, wp / w);

        let mut g = Array3::zeros((hp, wp, c));
        g.slice_mut(s![0..h0, 0..w0, ..]).assign(gout);
        if self.shift > 0 {
            g = roll3(&g, self.shift as isize, self.shift as isize);
        }

        let mut gx_grid = Array3::zeros((hp, wp, c));
        for wy in 0..nh {
            for wx in 0..nw {
                let wc = &cache.windows[wy * nw + wx];
                let mut gz = Array2::zeros((t, c));
                for dy in 0..w {
                    for dx in 0..w {
                        gz.row_mut(dy * w + dx)
                            .assign(&g.slice(s![wy * w + dy, wx * w + dx, ..]));
                    }
                }

                // z = y + mlp(ln2(y))
                let gmo = self.mlp.backward(&wc.mlp, &gz);
                let gy = &gz + &self.ln2.backward(&wc.ln2, &gmo);
                // y = x + attn(ln1(x))
                let (ga, gbias) = self.attn.backward(&wc.attn, &gy, true);
                self.scatter_bias_grad(&gbias.expect("bias grad requested"));
                let gx = &gy + &self.ln1.backward(&wc.ln1, &ga);

                for dy in 0..w {
                    for dx in 0..w {
                        gx_grid
                            .slice_mut(s![wy * w + dy, wx * w + dx, ..])
                            .assign(&gx.row(dy * w + dx));
                    }
                }
            }
        }

        if self.shift > 0 {
            gx_grid = roll3(&gx_grid, -(self.shift as isize), -(self.shift as isize));
        }
        gx_grid.slice(s![0..h0, 0..w0, ..]).to_owned()
    }

    /// Zeroes the attention and MLP output projections, turning the
    /// block into an exact identity map.
    pub fn zero_residual_branches(&mut self) {
        self.attn.wo.w.value.fill(0.0);
        self.attn.wo.b.value.fill(0.0);
        self.mlp.fc2.w.value.fill(0.0);
        self.mlp.fc2.b.value.fill(0.0);
    }
}

impl Visit for SwinBlock {
    fn visit(&mut self, path: &str, f: &mut ParamVisitor) {
        self.ln1.visit(&join(path, "ln1"), f);
        self.attn.visit(&join(path, "attn"), f);
        f(&join(path, "rel_bias"), ParamKind::Trainable, &mut self.rel_bias);
        self.ln2.visit(&join(path, "ln2"), f);
        self.mlp.visit(&join(path, "mlp"), f);
    }
}

pub(crate) fn dims3(x: &Array3<f64>) -> (usize, usize, usize) {
    (x.shape()[0], x.shape()[1], x.shape()[2])
}

/// Cyclic roll: `out[y][x] = in[(y+dy) mod h][(x+dx) mod w]`.
pub(crate) fn roll3(x: &Array3<f64>, dy: isize, dx: isize) -> Array3<f64> {
    let (h, w, c) = dims3(x);
    let wrap = |v: isize, n: usize| -> usize {
        (((v % n as isize) + n as isize) % n as isize) as usize
    };
    Array3::from_shape_fn((h, w, c), |(y, xx, ch)| {
        x[(wrap(y as isize + dy, h), wrap(xx as isize + dx, w), ch)]
    })
}
