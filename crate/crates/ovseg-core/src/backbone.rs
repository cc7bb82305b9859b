//! Vision/text encoder interfaces and the deterministic toy encoders.
//!
//! The toy vision encoder patchifies the image, projects each flattened
//! patch through a fixed random linear map to `D` dims, then applies one
//! trainable near-identity layer (the stand-in for the backbone's last
//! trainable blocks). A fixed seeded vector run through the same head
//! plays the global [CLS] token. The toy text encoder hashes whitespace
//! tokens into a fixed embedding table, mean-pools, projects to `2D`
//! dims, and applies its own trainable head.
//!
//! Dense per-cell descriptors concatenate `[cls; patch]`, giving every
//! grid cell the same `2D` dimensionality as the pooled global
//! descriptor and the text embeddings.

use ndarray::{s, Array1, Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::nn::{component_rng, join, Linear, Param, ParamKind, ParamVisitor, Visit};

/// Patch grid plus the global token, all dimension `D`.
#[derive(Debug, Clone)]
pub struct VisionFeatures {
    pub cls: Array1<f64>,
    /// `(h, w, D)` patch features.
    pub patches: Array3<f64>,
    pub patch_size: usize,
}

impl VisionFeatures {
    pub fn grid(&self) -> (usize, usize) {
        (self.patches.shape()[0], self.patches.shape()[1])
    }

    pub fn dim(&self) -> usize {
        self.cls.len()
    }
}

/// `[cls; mean of patches]`, dimension `2D`.
#[derive(Debug, Clone)]
pub struct GlobalDescriptor {
    pub g: Array1<f64>,
}

/// `(h, w, 2D)` grid of `[cls; patch]` descriptors.
pub type DenseDescriptorField = Array3<f64>;

/// Unit-norm ensembled class embedding, dimension `2D`.
#[derive(Debug, Clone)]
pub struct TextEmbedding {
    pub t: Array1<f64>,
}

/// Which backbone parts receive gradient updates (Table-4 style ablation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreezePolicy {
    pub last_two_vision_blocks_trainable: bool,
    pub text_encoder_trainable: bool,
}

impl Default for FreezePolicy {
    fn default() -> Self {
        Self { last_two_vision_blocks_trainable: true, text_encoder_trainable: false }
    }
}

impl FreezePolicy {
    /// Decides by parameter path whether an update may be applied.
    pub fn allows(&self, name: &str) -> bool {
        if name.contains("vision.") {
            self.last_two_vision_blocks_trainable
        } else if name.contains("text.") {
            self.text_encoder_trainable
        } else {
            true
        }
    }
}

/// Interface satisfied by any vision backbone adapter.
pub trait VisionEncoder {
    fn encode_image(&self, image: &Array3<f64>) -> Result<VisionFeatures>;
    fn feature_dim(&self) -> usize;
    fn patch_size(&self) -> usize;
}

/// Interface satisfied by any text backbone adapter. Outputs are raw
/// (pre-normalization) vectors of the descriptor dimension `2D`.
pub trait TextEncoder {
    fn encode_text(&self, prompt: &str) -> Result<Array1<f64>>;
    fn embed_dim(&self) -> usize;
}

/// g = [cls; mean over all patches].
pub fn pool_global(features: &VisionFeatures) -> GlobalDescriptor {
    let d = features.dim();
    let (h, w) = features.grid();
    let mut g = Array1::zeros(2 * d);
    g.slice_mut(s![0..d]).assign(&features.cls);
    let flat = features
        .patches
        .view()
        .into_shape_with_order((h * w, d))
        .expect("contiguous patch grid");
    g.slice_mut(s![d..2 * d]).assign(&flat.mean_axis(Axis(0)).expect("N >= 1"));
    GlobalDescriptor { g }
}

/// Cell (j, k) = [cls; patch(j, k)].
pub fn dense_descriptors(features: &VisionFeatures) -> DenseDescriptorField {
    let d = features.dim();
    let (h, w) = features.grid();
    let mut field = Array3::zeros((h, w, 2 * d));
    for j in 0..h {
        for k in 0..w {
            field.slice_mut(s![j, k, 0..d]).assign(&features.cls);
            field
                .slice_mut(s![j, k, d..2 * d])
                .assign(&features.patches.slice(s![j, k, ..]));
        }
    }
    field
}

/// Splits a dense-descriptor gradient back into cls and patch parts.
/// The cls gradient sums over all cells (cls is broadcast to each).
pub fn dense_descriptors_backward(
    gfield: &DenseDescriptorField,
    d: usize,
) -> (Array1<f64>, Array3<f64>) {
    let (h, w) = (gfield.shape()[0], gfield.shape()[1]);
    let mut gcls = Array1::zeros(d);
    let mut gpatches = Array3::zeros((h, w, d));
    for j in 0..h {
        for k in 0..w {
            gcls += &gfield.slice(s![j, k, 0..d]);
            gpatches
                .slice_mut(s![j, k, ..])
                .assign(&gfield.slice(s![j, k, d..2 * d]));
        }
    }
    (gcls, gpatches)
}

#[derive(Debug, Clone)]
pub struct ToyVisionEncoder {
    pub patch_size: usize,
    pub d: usize,
    /// Fixed random projection of flattened patch pixels to `D`.
    proj: Linear,
    /// Trainable near-identity head (the "last two blocks" stand-in).
    head: Linear,
    /// Fixed seeded global token, fed through the head like a patch.
    cls: Param,
}

/// Forward activations needed for the vision backward pass.
pub struct VisionCache {
    /// `(N, P*P*3)` flattened patches, input to `proj`.
    flat: Array2<f64>,
    /// `(N, D)` projected patches, input to `head`.
    mid: Array2<f64>,
    /// `(1, D)` raw cls row, input to `head`.
    cls_mid: Array2<f64>,
    h: usize,
    w: usize,
}

impl ToyVisionEncoder {
    pub fn new(master_seed: u64, patch_size: usize, d: usize) -> Self {
        let mut rng = component_rng(master_seed, "vision");
        let proj = Linear::fixed(&mut rng, patch_size * patch_size * 3, d);
        let head = Linear::near_identity(&mut rng, d, 0.01);
        let cls_vec = Array1::from_shape_fn(d, |_| {
            rand::Rng::random_range(&mut rng, -1.0..1.0)
        });
        Self { patch_size, d, proj, head, cls: Param::from1(cls_vec) }
    }

    fn patchify(&self, image: &Array3<f64>) -> Result<(Array2<f64>, usize, usize)> {
        let (hh, ww, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let p = self.patch_size;
        if hh % p != 0 || ww % p != 0 {
            return Err(Error::Shape(format!(
                "image {hh}x{ww} not divisible by patch size {p}"
            )));
        }
        let (h, w) = (hh / p, ww / p);
        let mut flat = Array2::zeros((h * w, p * p * 3));
        for j in 0..h {
            for k in 0..w {
                let mut row = flat.row_mut(j * w + k);
                for dy in 0..p {
                    for dx in 0..p {
                        for ch in 0..3 {
                            row[(dy * p + dx) * 3 + ch] = image[(j * p + dy, k * p + dx, ch)];
                        }
                    }
                }
            }
        }
        Ok((flat, h, w))
    }

    pub fn forward(&self, image: &Array3<f64>) -> Result<(VisionFeatures, VisionCache)> {
        let (flat, h, w) = self.patchify(image)?;
        let mid = self.proj.forward(&flat);
        let out = self.head.forward(&mid);
        let cls_mid = self.cls.v1().to_owned().insert_axis(Axis(0));
        let cls_out = self.head.forward(&cls_mid);

        let patches = out
            .into_shape_with_order((h, w, self.d))
            .expect("row-major reshape");
        let features =
            VisionFeatures { cls: cls_out.row(0).to_owned(), patches, patch_size: self.patch_size };
        Ok((features, VisionCache { flat, mid, cls_mid, h, w }))
    }

    /// Accumulates head gradients from upstream cls/patch gradients.
    pub fn backward(&mut self, cache: &VisionCache, gcls: &Array1<f64>, gpatches: &Array3<f64>) {
        let n = cache.h * cache.w;
        let gout = gpatches
            .view()
            .into_shape_with_order((n, self.d))
            .expect("row-major reshape")
            .to_owned();
        let gmid = self.head.backward(&cache.mid, &gout);
        self.proj.backward(&cache.flat, &gmid);
        let gcls_row = gcls.view().to_owned().insert_axis(Axis(0));
        let gcls_mid = self.head.backward(&cache.cls_mid, &gcls_row);
        self.cls.grad += &gcls_mid.row(0).to_owned().into_dyn();
    }
}

impl VisionEncoder for ToyVisionEncoder {
    fn encode_image(&self, image: &Array3<f64>) -> Result<VisionFeatures> {
        Ok(self.forward(image)?.0)
    }

    fn feature_dim(&self) -> usize {
        self.d
    }

    fn patch_size(&self) -> usize {
        self.patch_size
    }
}

impl Visit for ToyVisionEncoder {
    fn visit(&mut self, path: &str, f: &mut ParamVisitor) {
        self.proj.visit(&join(path, "proj"), f);
        self.head.visit(&join(path, "head"), f);
        f(&join(path, "cls"), ParamKind::Fixed, &mut self.cls);
    }
}

#[derive(Debug, Clone)]
pub struct ToyTextEncoder {
    /// Output dimension, always `2D` of the paired vision encoder.
    pub dim: usize,
    /// Fixed token embedding table, `(table_size, dim)` rows.
    table: Param,
    /// Fixed mixing projection.
    proj: Linear,
    /// Trainable near-identity head.
    head: Linear,
}

pub struct TextCache {
    /// Hashed row index per token.
    rows: Vec<usize>,
    /// `(1, dim)` mean of token rows, input to `proj`.
    mean: Array2<f64>,
    /// `(1, dim)` projected mean, input to `head`.
    mid: Array2<f64>,
}

impl ToyTextEncoder {
    pub fn new(master_seed: u64, dim: usize, table_size: usize) -> Self {
        assert!(table_size >= 1);
        let mut rng = component_rng(master_seed, "text");
        let table = Array2::from_shape_fn((table_size, dim), |_| {
            rand::Rng::random_range(&mut rng, -1.0..1.0)
        });
        let proj = Linear::fixed(&mut rng, dim, dim);
        let head = Linear::near_identity(&mut rng, dim, 0.01);
        Self { dim, table: Param::from2(table), proj, head }
    }

    fn token_rows(&self, prompt: &str) -> Result<Vec<usize>> {
        let table_size = self.table.value.shape()[0];
        let rows: Vec<usize> = prompt
            .split_whitespace()
            .map(|tok| (crate::nn::init::fnv1a(tok.as_bytes()) % table_size as u64) as usize)
            .collect();
        if rows.is_empty() {
            return Err(Error::Validation("prompt is empty".into()));
        }
        Ok(rows)
    }

    pub fn forward(&self, prompt: &str) -> Result<(Array1<f64>, TextCache)> {
        let rows = self.token_rows(prompt)?;
        let table = self.table.v2();
        let mut mean = Array1::<f64>::zeros(self.dim);
        for &r in &rows {
            mean += &table.row(r);
        }
        mean.mapv_inplace(|v| v / rows.len() as f64);
        let mean = mean.insert_axis(Axis(0));
        let mid = self.proj.forward(&mean);
        let out = self.head.forward(&mid);
        Ok((out.row(0).to_owned(), TextCache { rows, mean, mid }))
    }

    /// Accumulates head gradients; the table and projection are fixed
    /// buffers, so their grads are tracked but never applied.
    pub fn backward(&mut self, cache: &TextCache, gout: &Array1<f64>) {
        let gout = gout.view().to_owned().insert_axis(Axis(0));
        let gmid = self.head.backward(&cache.mid, &gout);
        let gmean = self.proj.backward(&cache.mean, &gmid);
        let scale = 1.0 / cache.rows.len() as f64;
        for &r in &cache.rows {
            let mut grow = self
                .table
                .grad
                .slice_mut(s![r, ..]);
            grow += &gmean.row(0).mapv(|v| v * scale);
        }
    }
}

impl TextEncoder for ToyTextEncoder {
    fn encode_text(&self, prompt: &str) -> Result<Array1<f64>> {
        Ok(self.forward(prompt)?.0)
    }

    fn embed_dim(&self) -> usize {
        self.dim
    }
}

impl Visit for ToyTextEncoder {
    fn visit(&mut self, path: &str, f: &mut ParamVisitor) {
        f(&join(path, "table"), ParamKind::Fixed, &mut self.table);
        self.proj.visit(&join(path, "proj"), f);
        self.head.visit(&join(path, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            ((y * 31 + x * 17 + c * 7) % 256) as f64 / 255.0
        })
    }

    #[test]
    fn encode_image_grid_dimensions() {
        let enc = ToyVisionEncoder::new(7, 16, 8);
        let (f, _) = enc.forward(&test_image(224, 224)).unwrap();
        assert_eq!(f.grid(), (14, 14));
        let (f, _) = enc.forward(&test_image(16, 16)).unwrap();
        assert_eq!(f.grid(), (1, 1));
    }

    #[test]
    fn indivisible_image_is_shape_error() {
        let enc = ToyVisionEncoder::new(7, 16, 8);
        let img = test_image(225, 224);
        assert!(matches!(enc.forward(&img), Err(Error::Shape(_))));
    }

    #[test]
    fn pool_global_identical_patches() {
        let cls = Array1::from_vec(vec![1.0, 2.0]);
        let v = [0.5, -0.25];
        let patches = Array3::from_shape_fn((2, 3, 2), |(_, _, d)| v[d]);
        let g = pool_global(&VisionFeatures { cls, patches, patch_size: 16 }).g;
        assert_eq!(g.to_vec(), vec![1.0, 2.0, 0.5, -0.25]);
    }

    #[test]
    fn pool_global_matches_loop_oracle() {
        let enc = ToyVisionEncoder::new(9, 16, 8);
        let (f, _) = enc.forward(&test_image(32, 32)).unwrap();
        let g = pool_global(&f).g;
        let (h, w) = f.grid();
        for d in 0..8 {
            assert!((g[d] - f.cls[d]).abs() < 1e-12);
            let mut mean = 0.0;
            for j in 0..h {
                for k in 0..w {
                    mean += f.patches[(j, k, d)];
                }
            }
            mean /= (h * w) as f64;
            assert!((g[8 + d] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn pool_global_is_patch_permutation_invariant() {
        let enc = ToyVisionEncoder::new(9, 16, 8);
        let (f, _) = enc.forward(&test_image(32, 48)).unwrap();
        let g = pool_global(&f).g;
        // reverse the grid
        let (h, w) = f.grid();
        let rev = Array3::from_shape_fn((h, w, 8), |(j, k, d)| {
            f.patches[(h - 1 - j, w - 1 - k, d)]
        });
        let g2 = pool_global(&VisionFeatures { cls: f.cls.clone(), patches: rev, patch_size: 16 }).g;
        for (a, b) in g.iter().zip(g2.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn dense_descriptors_single_cell_equals_global() {
        let enc = ToyVisionEncoder::new(11, 16, 8);
        let (f, _) = enc.forward(&test_image(16, 16)).unwrap();
        let field = dense_descriptors(&f);
        let g = pool_global(&f).g;
        for d in 0..16 {
            assert!((field[(0, 0, d)] - g[d]).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_descriptors_cell_layout() {
        let enc = ToyVisionEncoder::new(11, 16, 8);
        let (f, _) = enc.forward(&test_image(48, 32)).unwrap();
        let field = dense_descriptors(&f);
        assert_eq!(field.shape(), &[3, 2, 16]);
        for j in 0..3 {
            for k in 0..2 {
                for d in 0..8 {
                    assert_eq!(field[(j, k, d)], f.cls[d]);
                    assert_eq!(field[(j, k, 8 + d)], f.patches[(j, k, d)]);
                }
            }
        }
    }

    #[test]
    fn toy_encoders_are_seed_deterministic() {
        let a = ToyVisionEncoder::new(42, 16, 8);
        let b = ToyVisionEncoder::new(42, 16, 8);
        let img = test_image(32, 32);
        let (fa, _) = a.forward(&img).unwrap();
        let (fb, _) = b.forward(&img).unwrap();
        assert_eq!(fa.patches, fb.patches);
        assert_eq!(fa.cls, fb.cls);

        let ta = ToyTextEncoder::new(42, 16, 256);
        let tb = ToyTextEncoder::new(42, 16, 256);
        let (ea, _) = ta.forward("a photo of road").unwrap();
        let (eb, _) = tb.forward("a photo of road").unwrap();
        assert_eq!(ea, eb);
    }

    #[test]
    fn distinct_prompts_get_distinct_embeddings() {
        let t = ToyTextEncoder::new(1, 16, 4096);
        let (a, _) = t.forward("a photo of road").unwrap();
        let (b, _) = t.forward("a photo of water").unwrap();
        assert!(a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn empty_prompt_rejected() {
        let t = ToyTextEncoder::new(1, 16, 256);
        assert!(matches!(t.forward("   "), Err(Error::Validation(_))));
    }

    #[test]
    fn vision_backward_matches_finite_differences() {
        let mut enc = ToyVisionEncoder::new(13, 4, 6);
        let img = test_image(8, 8);
        let coeff_cls = Array1::from_shape_fn(6, |i| ((i as f64) * 0.3).sin());
        let coeff_p = Array3::from_shape_fn((2, 2, 6), |(j, k, d)| {
            ((j * 5 + k * 3 + d) as f64 * 0.17).cos()
        });
        let loss = |e: &ToyVisionEncoder| {
            let (f, _) = e.forward(&img).unwrap();
            (&f.cls * &coeff_cls).sum() + (&f.patches * &coeff_p).sum()
        };
        let (_, cache) = enc.forward(&img).unwrap();
        enc.backward(&cache, &coeff_cls, &coeff_p);

        let h = 1e-6;
        for idx in [(0usize, 0usize), (2, 3), (5, 1)] {
            let g = enc.head.w.grad[[idx.0, idx.1]];
            let mut ep = enc.clone();
            ep.head.w.value[[idx.0, idx.1]] += h;
            let mut em = enc.clone();
            em.head.w.value[[idx.0, idx.1]] -= h;
            let fd = (loss(&ep) - loss(&em)) / (2.0 * h);
            assert!((g - fd).abs() < 1e-5, "head.w{idx:?}: {g} vs {fd}");
        }
        let g = enc.cls.grad[[1]];
        let mut ep = enc.clone();
        ep.cls.value[[1]] += h;
        let mut em = enc.clone();
        em.cls.value[[1]] -= h;
        let fd = (loss(&ep) - loss(&em)) / (2.0 * h);
        assert!((g - fd).abs() < 1e-5);
    }

    #[test]
    fn text_backward_matches_finite_differences() {
        let mut enc = ToyTextEncoder::new(17, 8, 64);
        let coeff = Array1::from_shape_fn(8, |i| ((i as f64) * 0.7).sin());
        let loss = |e: &ToyTextEncoder| {
            let (v, _) = e.forward("a photo of road").unwrap();
            (&v * &coeff).sum()
        };
        let (_, cache) = enc.forward("a photo of road").unwrap();
        enc.backward(&cache, &coeff);

        let h = 1e-6;
        for idx in [(0usize, 0usize), (3, 5)] {
            let g = enc.head.w.grad[[idx.0, idx.1]];
            let mut ep = enc.clone();
            ep.head.w.value[[idx.0, idx.1]] += h;
            let mut em = enc.clone();
            em.head.w.value[[idx.0, idx.1]] -= h;
            let fd = (loss(&ep) - loss(&em)) / (2.0 * h);
            assert!((g - fd).abs() < 1e-6, "head.w{idx:?}: {g} vs {fd}");
        }
    }

    #[test]
    fn freeze_policy_routes_by_path() {
        let p = FreezePolicy { last_two_vision_blocks_trainable: false, text_encoder_trainable: true };
        assert!(!p.allows("backbone.vision.head.w"));
        assert!(p.allows("backbone.text.head.w"));
        assert!(p.allows("aggregator.block0.attn.wq.w"));
    }
}
