//! Guidance-based upsampling of aggregated cost maps, shared-weight
//! channel reduction, and argmax prediction.
//!
//! The reference upsampler is a joint-bilateral interpolator: each
//! high-resolution pixel mixes its 2x2 nearest low-resolution cells
//! with tent (bilinear) spatial weights modulated by an image-color
//! Gaussian, normalized to sum 1. With uniform guidance it reduces to
//! exact bilinear interpolation; at equal resolution it is the
//! identity. It is training-free and linear in the features, so its
//! transpose is the exact gradient operator.

use ndarray::{s, Array2, Array3};
use rand_chacha::ChaCha8Rng;

use crate::agg::ProjectedCostVolume;
use crate::error::{Error, Result};
use crate::nn::{join, Linear, ParamVisitor, Visit};

/// Frozen guidance-based feature upsampler interface.
pub trait GuidedUpsampler {
    /// `(image H x W x 3, features h x w x C) -> H x W x C`.
    fn upsample(&self, image: &Array3<f64>, features: &Array3<f64>) -> Result<Array3<f64>>;
}

#[derive(Debug, Clone, Copy)]
pub struct BilateralUpsampler {
    pub sigma_color: f64,
    /// Extra Gaussian falloff on the spatial offset; `None` keeps the
    /// pure tent weights.
    pub sigma_spatial: Option<f64>,
}

impl Default for BilateralUpsampler {
    fn default() -> Self {
        Self { sigma_color: 0.1, sigma_spatial: None }
    }
}

/// Precomputed sparse mixing weights from one guidance image: for each
/// output pixel, up to four (cell_j, cell_k, weight) entries.
pub struct UpsamplePlan {
    pub hh: usize,
    pub ww: usize,
    pub h: usize,
    pub w: usize,
    entries: Vec<Vec<(usize, usize, f64)>>,
}

/// Clamped bilinear sample of a 3-channel image at fractional (y, x).
fn sample_color(image: &Array3<f64>, y: f64, x: f64) -> [f64; 3] {
    let (hh, ww) = (image.shape()[0], image.shape()[1]);
    let j0 = y.floor();
    let k0 = x.floor();
    let ty = y - j0;
    let tx = x - k0;
    let cj = |v: f64| (v.max(0.0) as usize).min(hh - 1);
    let ck = |v: f64| (v.max(0.0) as usize).min(ww - 1);
    let (j0c, j1c) = (cj(j0), cj(j0 + 1.0));
    let (k0c, k1c) = (ck(k0), ck(k0 + 1.0));
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = (1.0 - ty) * (1.0 - tx) * image[(j0c, k0c, c)]
            + (1.0 - ty) * tx * image[(j0c, k1c, c)]
            + ty * (1.0 - tx) * image[(j1c, k0c, c)]
            + ty * tx * image[(j1c, k1c, c)];
    }
    out
}

impl BilateralUpsampler {
    /// Builds the mixing plan for lifting an `h x w` grid to the
    /// resolution of `image`.
    pub fn plan(&self, image: &Array3<f64>, h: usize, w: usize) -> Result<UpsamplePlan> {
        let (hh, ww, ch) = (image.shape()[0], image.shape()[1], image.shape()[2]);
        if ch != 3 {
            return Err(Error::Shape(format!("guidance image must have 3 channels, got {ch}")));
        }
        if hh < h || ww < w {
            return Err(Error::Shape(format!(
                "image {hh}x{ww} is smaller than the {h}x{w} feature grid"
            )));
        }

        // guidance color at each low-res cell center
        let mut cell_color = vec![[0.0f64; 3]; h * w];
        for j in 0..h {
            for k in 0..w {
                let py = (j as f64 + 0.5) * hh as f64 / h as f64 - 0.5;
                let px = (k as f64 + 0.5) * ww as f64 / w as f64 - 0.5;
                cell_color[j * w + k] = sample_color(image, py, px);
            }
        }

        let inv2sc = 1.0 / (2.0 * self.sigma_color * self.sigma_color);
        let mut entries = Vec::with_capacity(hh * ww);
        for y in 0..hh {
            for x in 0..ww {
                let cy = (y as f64 + 0.5) * h as f64 / hh as f64 - 0.5;
                let cx = (x as f64 + 0.5) * w as f64 / ww as f64 - 0.5;
                let j0 = cy.floor();
                let k0 = cx.floor();
                let ty = cy - j0;
                let tx = cx - k0;
                let jc = |v: f64| (v.max(0.0) as usize).min(h - 1);
                let kc = |v: f64| (v.max(0.0) as usize).min(w - 1);
                let cells = [
                    (jc(j0), kc(k0), (1.0 - ty) * (1.0 - tx), ty, tx),
                    (jc(j0), kc(k0 + 1.0), (1.0 - ty) * tx, ty, 1.0 - tx),
                    (jc(j0 + 1.0), kc(k0), ty * (1.0 - tx), 1.0 - ty, tx),
                    (jc(j0 + 1.0), kc(k0 + 1.0), ty * tx, 1.0 - ty, 1.0 - tx),
                ];
                let pix = [image[(y, x, 0)], image[(y, x, 1)], image[(y, x, 2)]];
                let mut list: Vec<(usize, usize, f64)> = Vec::with_capacity(4);
                let mut total = 0.0;
                for &(j, k, tent, dy, dx) in &cells {
                    if tent == 0.0 {
                        continue;
                    }
                    let cc = cell_color[j * w + k];
                    let dc = (pix[0] - cc[0]).powi(2)
                        + (pix[1] - cc[1]).powi(2)
                        + (pix[2] - cc[2]).powi(2);
                    let mut wgt = tent * (-dc * inv2sc).exp();
                    if let Some(ss) = self.sigma_spatial {
                        let d2 = dy * dy + dx * dx;
                        wgt *= (-d2 / (2.0 * ss * ss)).exp();
                    }
                    list.push((j, k, wgt));
                    total += wgt;
                }
                for e in &mut list {
                    e.2 /= total;
                }
                entries.push(list);
            }
        }
        Ok(UpsamplePlan { hh, ww, h, w, entries })
    }
}

impl UpsamplePlan {
    pub fn apply(&self, features: &Array3<f64>) -> Result<Array3<f64>> {
        let (h, w, c) = (features.shape()[0], features.shape()[1], features.shape()[2]);
        if h != self.h || w != self.w {
            return Err(Error::Shape(format!(
                "plan built for {}x{} features, got {h}x{w}",
                self.h, self.w
            )));
        }
        let mut out = Array3::zeros((self.hh, self.ww, c));
        for y in 0..self.hh {
            for x in 0..self.ww {
                for &(j, k, wgt) in &self.entries[y * self.ww + x] {
                    for ch in 0..c {
                        out[(y, x, ch)] += wgt * features[(j, k, ch)];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Exact adjoint of [`apply`](Self::apply): scatters an output
    /// gradient back onto the low-res grid.
    pub fn apply_transpose(&self, g: &Array3<f64>) -> Array3<f64> {
        let c = g.shape()[2];
        let mut out = Array3::zeros((self.h, self.w, c));
        for y in 0..self.hh {
            for x in 0..self.ww {
                for &(j, k, wgt) in &self.entries[y * self.ww + x] {
                    for ch in 0..c {
                        out[(j, k, ch)] += wgt * g[(y, x, ch)];
                    }
                }
            }
        }
        out
    }
}

impl GuidedUpsampler for BilateralUpsampler {
    fn upsample(&self, image: &Array3<f64>, features: &Array3<f64>) -> Result<Array3<f64>> {
        self.plan(image, features.shape()[0], features.shape()[1])?.apply(features)
    }
}

/// Upsamples each class slice independently, verifying the upsampler
/// honors its shape contract.
pub fn upsample_classwise(
    image: &Array3<f64>,
    v: &ProjectedCostVolume,
    up: &dyn GuidedUpsampler,
) -> Result<Vec<Array3<f64>>> {
    let (h, w, m, d) = v.shape();
    let (hh, ww) = (image.shape()[0], image.shape()[1]);
    if hh < h || ww < w {
        return Err(Error::Shape(format!(
            "image {hh}x{ww} is smaller than the {h}x{w} feature grid"
        )));
    }
    let mut maps = Vec::with_capacity(m);
    for i in 0..m {
        let slice = v.values.slice(s![.., .., i, ..]).to_owned();
        let out = up.upsample(image, &slice)?;
        if out.shape() != [hh, ww, d] {
            return Err(Error::Contract(format!(
                "upsampler returned {:?}, expected [{hh}, {ww}, {d}]",
                out.shape()
            )));
        }
        maps.push(out);
    }
    Ok(maps)
}

/// Shared 1x1 reduction from `D_agg` channels to one score per pixel,
/// applied with identical weights to every class map.
#[derive(Debug, Clone)]
pub struct ReduceHead {
    pub lin: Linear,
}

impl ReduceHead {
    pub fn new(rng: &mut ChaCha8Rng, d: usize) -> Self {
        Self { lin: Linear::new(rng, d, 1) }
    }

    /// Weights that copy one input channel through; used to pin the
    /// reduction contract in tests.
    pub fn select_channel(d: usize, ch: usize) -> Self {
        let mut rng = crate::nn::component_rng(0, "reduce-select");
        let mut head = Self::new(&mut rng, d);
        head.lin.w.value.fill(0.0);
        head.lin.w.value[[ch, 0]] = 1.0;
        head.lin.b.value.fill(0.0);
        head
    }

    pub fn d_in(&self) -> usize {
        self.lin.d_in()
    }

    /// `(H, W, D) -> (H, W)`.
    pub fn forward(&self, map: &Array3<f64>) -> Array2<f64> {
        let (h, w, d) = (map.shape()[0], map.shape()[1], map.shape()[2]);
        let flat = map.view().into_shape_with_order((h * w, d)).expect("contiguous");
        let out = self.lin.forward(&flat.to_owned());
        out.into_shape_with_order((h, w)).expect("single channel")
    }

    /// Accumulates weight grads; returns the input-map gradient.
    pub fn backward(&mut self, map: &Array3<f64>, gscore: &Array2<f64>) -> Array3<f64> {
        let (h, w, d) = (map.shape()[0], map.shape()[1], map.shape()[2]);
        let flat = map.view().into_shape_with_order((h * w, d)).expect("contiguous").to_owned();
        let gy = gscore
            .view()
            .into_shape_with_order((h * w, 1))
            .expect("contiguous")
            .to_owned();
        let gx = self.lin.backward(&flat, &gy);
        gx.into_shape_clone((h, w, d)).expect("same size")
    }
}

impl Visit for ReduceHead {
    fn visit(&mut self, path: &str, f: &mut ParamVisitor) {
        self.lin.visit(&join(path, "lin"), f);
    }
}

/// Per-pixel class scores at image resolution.
#[derive(Debug, Clone)]
pub struct ScoreMaps {
    /// `(H, W, M)`.
    pub values: Array3<f64>,
}

pub const IGNORE_LABEL: u8 = 255;

/// Hard per-pixel labels; `ignore_label` marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    pub labels: Array2<u8>,
    pub ignore_label: u8,
}

impl SegmentationMask {
    pub fn new(labels: Array2<u8>) -> Self {
        Self { labels, ignore_label: IGNORE_LABEL }
    }

    /// Every non-ignore label must be `< m`.
    pub fn validate(&self, m: usize) -> Result<()> {
        for &l in self.labels.iter() {
            if l != self.ignore_label && (l as usize) >= m {
                return Err(Error::Validation(format!(
                    "label {l} out of range for {m} classes"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOrder {
    ReduceAfterUp,
    ReduceBeforeUp,
}

impl ReduceOrder {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "reduce_after_up" => Some(Self::ReduceAfterUp),
            "reduce_before_up" => Some(Self::ReduceBeforeUp),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::ReduceAfterUp => "reduce_after_up",
            Self::ReduceBeforeUp => "reduce_before_up",
        }
    }
}

/// Full-resolution per-class scores for one image window.
pub fn score_maps(
    image: &Array3<f64>,
    v: &ProjectedCostVolume,
    up: &dyn GuidedUpsampler,
    reduce: &ReduceHead,
    order: ReduceOrder,
) -> Result<ScoreMaps> {
    let (_, _, m, d) = v.shape();
    let (hh, ww) = (image.shape()[0], image.shape()[1]);
    if reduce.d_in() != d {
        return Err(Error::Shape(format!(
            "reduce head expects {} channels, volume has {d}",
            reduce.d_in()
        )));
    }
    let mut scores = Array3::zeros((hh, ww, m));
    match order {
        ReduceOrder::ReduceAfterUp => {
            for (i, map) in upsample_classwise(image, v, up)?.into_iter().enumerate() {
                scores.slice_mut(s![.., .., i]).assign(&reduce.forward(&map));
            }
        }
        ReduceOrder::ReduceBeforeUp => {
            for i in 0..m {
                let slice = v.values.slice(s![.., .., i, ..]).to_owned();
                let low = reduce.forward(&slice).insert_axis(ndarray::Axis(2));
                let out = up.upsample(image, &low)?;
                if out.shape() != [hh, ww, 1] {
                    return Err(Error::Contract(format!(
                        "upsampler returned {:?}, expected [{hh}, {ww}, 1]",
                        out.shape()
                    )));
                }
                scores.slice_mut(s![.., .., i]).assign(&out.slice(s![.., .., 0]));
            }
        }
    }
    Ok(ScoreMaps { values: scores })
}

/// Argmax over the class axis; ties go to the lowest class index.
pub fn argmax_mask(scores: &ScoreMaps) -> SegmentationMask {
    let (h, w, m) = (
        scores.values.shape()[0],
        scores.values.shape()[1],
        scores.values.shape()[2],
    );
    let labels = Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0usize;
        let mut best_v = scores.values[(y, x, 0)];
        for i in 1..m {
            let v = scores.values[(y, x, i)];
            if v > best_v {
                best = i;
                best_v = v;
            }
        }
        best as u8
    });
    SegmentationMask::new(labels)
}

/// Upsample, reduce (in the configured order), then argmax.
pub fn predict(
    image: &Array3<f64>,
    v: &ProjectedCostVolume,
    up: &dyn GuidedUpsampler,
    reduce: &ReduceHead,
    order: ReduceOrder,
) -> Result<SegmentationMask> {
    Ok(argmax_mask(&score_maps(image, v, up, reduce, order)?))
}

/// Mean per-channel descriptor of the guidance behavior used in tests:
/// a uniform image makes the bilateral weights purely spatial.
pub fn uniform_image(h: usize, w: usize) -> Array3<f64> {
    Array3::from_elem((h, w, 3), 0.5)
}
