//! 2-D convolution over single feature maps, shape `(h, w, channels)`.
//!
//! Odd kernel sizes with zero "same" padding, stride 1. Written as explicit
//! loops; the maps this pipeline convolves are at patch-grid resolution, so
//! clarity wins over blocking tricks.

use ndarray::{Array1, Array3, Array4};
use rand_chacha::ChaCha8Rng;

use super::init;
use super::param::{join, Param, ParamKind, ParamVisitor, Visit};

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// Kernel, shape `[kh, kw, cin, cout]`.
    pub w: Param,
    /// Bias, shape `[cout]`.
    pub b: Param,
}

impl Conv2d {
    pub fn new(rng: &mut ChaCha8Rng, k: usize, cin: usize, cout: usize) -> Self {
        assert!(k % 2 == 1, "same-padding conv needs an odd kernel");
        Self {
            w: Param::from4(init::xavier4(rng, k, k, cin, cout)),
            b: Param::from1(Array1::zeros(cout)),
        }
    }

    pub fn kernel(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.w.value.shape()[2]
    }

    pub fn c_out(&self) -> usize {
        self.w.value.shape()[3]
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (h, w, cin) = x.dim();
        assert_eq!(cin, self.c_in(), "conv input channels");
        let k = self.kernel();
        let pad = k / 2;
        let cout = self.c_out();
        let kw = self.w.v4();
        let b = self.b.v1();

        let mut y = Array3::zeros((h, w, cout));
        for oy in 0..h {
            for ox in 0..w {
                for co in 0..cout {
                    let mut acc = b[co];
                    for ky in 0..k {
                        let iy = oy as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox as isize + kx as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x[(iy as usize, ix as usize, ci)] * kw[(ky, kx, ci, co)];
                            }
                        }
                    }
                    y[(oy, ox, co)] = acc;
                }
            }
        }
        y
    }

    /// Accumulates kernel/bias gradients and returns `dloss/dx`.
    pub fn backward(&mut self, x: &Array3<f64>, gy: &Array3<f64>) -> Array3<f64> {
        let (h, w, cin) = x.dim();
        let k = self.kernel();
        let pad = k / 2;
        let cout = self.c_out();
        let kw = self.w.v4().to_owned();

        let mut gw = Array4::<f64>::zeros((k, k, cin, cout));
        let mut gb = Array1::<f64>::zeros(cout);
        let mut gx = Array3::<f64>::zeros((h, w, cin));

        for oy in 0..h {
            for ox in 0..w {
                for co in 0..cout {
                    let g = gy[(oy, ox, co)];
                    if g == 0.0 {
                        continue;
                    }
                    gb[co] += g;
                    for ky in 0..k {
                        let iy = oy as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox as isize + kx as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                gw[(ky, kx, ci, co)] += x[(iy as usize, ix as usize, ci)] * g;
                                gx[(iy as usize, ix as usize, ci)] += kw[(ky, kx, ci, co)] * g;
                            }
                        }
                    }
                }
            }
        }
        self.w.grad += &gw.into_dyn();
        self.b.grad += &gb.into_dyn();
        gx
    }
}

impl Visit for Conv2d {
    fn visit(&mut self, path: &str, f: &mut ParamVisitor) {
        f(&join(path, "w"), ParamKind::Trainable, &mut self.w);
        f(&join(path, "b"), ParamKind::Trainable, &mut self.b);
    }
}
