//! End-to-end model assembly: backbone encoders, cost volume,
//! aggregator, guided upsampler, and reduction head.
//!
//! `forward`/`backward` expose the differentiable training path (score
//! maps at image resolution, reduce-after-up). Inference goes through
//! [`Model::score_maps`], which honors the configured reduce order.

use ndarray::{s, Array1, Array2, Array3, Array4};

use crate::agg::{Aggregator, AggregatorConfig, AggCache, ProjectedCostVolume};
use crate::backbone::{
    dense_descriptors, dense_descriptors_backward, DenseDescriptorField, ToyTextEncoder,
    ToyVisionEncoder, VisionCache,
};
use crate::backbone::TextCache;
use crate::cost::{build_cost_volume, build_cost_volume_backward, CostVolume};
use crate::error::{Error, Result};
use crate::nn::{component_rng, join, ParamVisitor, Visit};
use crate::upsample::{
    BilateralUpsampler, ReduceHead, ReduceOrder, ScoreMaps, UpsamplePlan,
};
use crate::vocab::{render_prompts, ClassVocabulary, PromptTemplateSet};

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub master_seed: u64,
    pub patch_size: usize,
    /// Vision feature width `D`; descriptors and text embeddings are `2D`.
    pub vision_dim: usize,
    pub text_table_size: usize,
    pub agg: AggregatorConfig,
    pub sigma_color: f64,
    pub sigma_spatial: Option<f64>,
    pub reduce_order: ReduceOrder,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            patch_size: 16,
            vision_dim: 32,
            text_table_size: 4096,
            agg: AggregatorConfig::default(),
            sigma_color: 0.1,
            sigma_spatial: None,
            reduce_order: ReduceOrder::ReduceAfterUp,
        }
    }
}

impl ModelConfig {
    /// Small configuration that trains in seconds on a CPU.
    pub fn desk() -> Self {
        Self {
            master_seed: 0,
            patch_size: 8,
            vision_dim: 16,
            text_table_size: 512,
            agg: AggregatorConfig {
                d_agg: 16,
                num_blocks: 1,
                window_size: 4,
                num_heads: 2,
                ..AggregatorConfig::default()
            },
            sigma_color: 0.1,
            sigma_spatial: None,
            reduce_order: ReduceOrder::ReduceAfterUp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be >= 1".into()));
        }
        if self.vision_dim == 0 {
            return Err(Error::Config("vision_dim must be >= 1".into()));
        }
        if self.text_table_size == 0 {
            return Err(Error::Config("text_table_size must be >= 1".into()));
        }
        if self.sigma_color <= 0.0 {
            return Err(Error::Config("sigma_color must be positive".into()));
        }
        self.agg.validate()
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub vision: ToyVisionEncoder,
    pub text: ToyTextEncoder,
    pub aggregator: Aggregator,
    pub reduce: ReduceHead,
    pub upsampler: BilateralUpsampler,
}

/// Per-class caches from prompt-ensemble embedding, for the text
/// backward pass.
pub struct EmbedCache {
    /// One entry per class: the per-prompt encoder caches plus the
    /// pre-normalization mean and its norm.
    classes: Vec<ClassEmbedCache>,
}

struct ClassEmbedCache {
    prompts: Vec<TextCache>,
    mean: Array1<f64>,
    norm: f64,
}

/// Activations retained by [`Model::forward`] for [`Model::backward`].
pub struct ForwardCache {
    pub vision: VisionCache,
    pub field: DenseDescriptorField,
    pub embeddings: Array2<f64>,
    pub cost: CostVolume,
    pub agg: AggCache,
    pub vol: ProjectedCostVolume,
    pub plan: UpsamplePlan,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let vision = ToyVisionEncoder::new(cfg.master_seed, cfg.patch_size, cfg.vision_dim);
        let text = ToyTextEncoder::new(cfg.master_seed, 2 * cfg.vision_dim, cfg.text_table_size);
        let aggregator = Aggregator::new(cfg.master_seed, cfg.agg.clone())?;
        let mut rng = component_rng(cfg.master_seed, "reduce");
        let reduce = ReduceHead::new(&mut rng, cfg.agg.d_agg);
        let upsampler = BilateralUpsampler {
            sigma_color: cfg.sigma_color,
            sigma_spatial: cfg.sigma_spatial,
        };
        Ok(Self { cfg, vision, text, aggregator, reduce, upsampler })
    }

    /// Prompt-ensembled class embeddings, `(M, 2D)` rows of unit norm.
    pub fn embed_classes(
        &self,
        vocab: &ClassVocabulary,
        templates: &PromptTemplateSet,
    ) -> Result<Array2<f64>> {
        Ok(self.embed_classes_cached(vocab, templates)?.0)
    }

    /// As [`embed_classes`](Self::embed_classes) but keeps the caches
    /// needed to push gradients back into the text encoder.
    pub fn embed_classes_cached(
        &self,
        vocab: &ClassVocabulary,
        templates: &PromptTemplateSet,
    ) -> Result<(Array2<f64>, EmbedCache)> {
        let dd = 2 * self.cfg.vision_dim;
        let mut rows = Array2::zeros((vocab.len(), dd));
        let mut classes = Vec::with_capacity(vocab.len());
        for (i, name) in vocab.names().iter().enumerate() {
            let prompts = render_prompts(name, templates)?;
            let mut mean = Array1::zeros(dd);
            let mut caches = Vec::with_capacity(prompts.len());
            for p in &prompts {
                let (t, cache) = self.text.forward(p)?;
                mean += &t;
                caches.push(cache);
            }
            mean /= prompts.len() as f64;
            let norm = mean.dot(&mean).sqrt();
            if norm < 1e-12 {
                return Err(Error::Degenerate(format!(
                    "ensemble embedding for '{name}' has near-zero norm"
                )));
            }
            rows.row_mut(i).assign(&(&mean / norm));
            classes.push(ClassEmbedCache { prompts: caches, mean, norm });
        }
        Ok((rows, EmbedCache { classes }))
    }

    /// Routes `(M, 2D)` embedding gradients through the normalization,
    /// the prompt mean, and the text encoder.
    pub fn embed_classes_backward(&mut self, cache: &EmbedCache, gembed: &Array2<f64>) {
        for (i, cls) in cache.classes.iter().enumerate() {
            let g = gembed.row(i).to_owned();
            let e = &cls.mean / cls.norm;
            // d(m/|m|)/dm applied to g: (g - (g.e) e) / |m|
            let gm = (&g - &(&e * g.dot(&e))) / cls.norm;
            let per_prompt = &gm / cls.prompts.len() as f64;
            for pc in &cls.prompts {
                self.text.backward(pc, &per_prompt);
            }
        }
    }

    /// Raw cosine cost volume for an image against prepared embeddings.
    pub fn cost_volume(
        &self,
        image: &Array3<f64>,
        embeddings: &Array2<f64>,
    ) -> Result<CostVolume> {
        let (features, _) = self.vision.forward(image)?;
        let field = dense_descriptors(&features);
        build_cost_volume(&field, embeddings)
    }

    /// Training forward pass: image-resolution score maps via the
    /// reduce-after-up path, with all caches retained.
    pub fn forward(
        &self,
        image: &Array3<f64>,
        embeddings: &Array2<f64>,
    ) -> Result<(ScoreMaps, ForwardCache)> {
        let (features, vision) = self.vision.forward(image)?;
        let field = dense_descriptors(&features);
        let cost = build_cost_volume(&field, embeddings)?;
        let (vol, agg) = self.aggregator.forward(&cost);
        let (h, w, m, _d) = vol.shape();
        let plan = self.upsampler.plan(image, h, w)?;
        let (hh, ww) = (image.shape()[0], image.shape()[1]);
        let mut scores = Array3::zeros((hh, ww, m));
        for i in 0..m {
            let up = plan.apply(&vol.values.slice(s![.., .., i, ..]).to_owned())?;
            scores.slice_mut(s![.., .., i]).assign(&self.reduce.forward(&up));
        }
        let cache = ForwardCache {
            vision,
            field,
            embeddings: embeddings.clone(),
            cost,
            agg,
            vol,
            plan,
        };
        Ok((ScoreMaps { values: scores }, cache))
    }

    /// Backward pass from a score-map gradient. Accumulates into every
    /// trainable component and returns the class-embedding gradient
    /// (to be fed to [`embed_classes_backward`](Self::embed_classes_backward)).
    pub fn backward(&mut self, cache: &ForwardCache, gscores: &Array3<f64>) -> Array2<f64> {
        let (h, w, m, d) = cache.vol.shape();
        let mut gvol = Array4::zeros((h, w, m, d));
        for i in 0..m {
            let vol_i = cache.vol.values.slice(s![.., .., i, ..]).to_owned();
            let up = cache.plan.apply(&vol_i).expect("plan matches cached volume");
            let gscore = gscores.slice(s![.., .., i]).to_owned();
            let gup = self.reduce.backward(&up, &gscore);
            let glow = cache.plan.apply_transpose(&gup);
            gvol.slice_mut(s![.., .., i, ..]).assign(&glow);
        }
        let gcost = self.aggregator.backward(&cache.agg, &gvol);
        let (gfield, gembed) =
            build_cost_volume_backward(&cache.field, &cache.embeddings, &gcost);
        let (gcls, gpatches) = dense_descriptors_backward(&gfield, self.cfg.vision_dim);
        self.vision.backward(&cache.vision, &gcls, &gpatches);
        gembed
    }

    /// Inference-path score maps honoring the configured reduce order.
    pub fn score_maps(&self, image: &Array3<f64>, embeddings: &Array2<f64>) -> Result<ScoreMaps> {
        let (features, _) = self.vision.forward(image)?;
        let field = dense_descriptors(&features);
        let cost = build_cost_volume(&field, embeddings)?;
        let vol = self.aggregator.aggregate(&cost);
        crate::upsample::score_maps(image, &vol, &self.upsampler, &self.reduce, self.cfg.reduce_order)
    }

    /// Zeroes every gradient buffer.
    pub fn zero_grads(&mut self) {
        self.visit("", &mut |_, _, p| p.grad.fill(0.0));
    }

    pub fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, p| n += p.value.len());
        n
    }
}

impl Visit for Model {
    fn visit(&mut self, path: &str, f: &mut ParamVisitor) {
        self.vision.visit(&join(path, "backbone.vision"), f);
        self.text.visit(&join(path, "backbone.text"), f);
        self.aggregator.visit(&join(path, "aggregator"), f);
        self.reduce.visit(&join(path, "reduce"), f);
    }
}
