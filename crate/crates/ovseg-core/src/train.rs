//! Supervised training: subset filtering, cross-entropy loss over
//! upsampled score maps, and the optimizer loop with freeze-policy
//! gating and two learning-rate tiers.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::backbone::FreezePolicy;
use crate::error::{Error, Result};
use crate::imageio;
use crate::model::Model;
use crate::nn::{component_rng, AdamW, ParamKind, Visit};
use crate::upsample::{ScoreMaps, SegmentationMask, IGNORE_LABEL};
use crate::vocab::{ClassVocabulary, PromptTemplateSet};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub train_resolution: usize,
    pub lr_main: f64,
    pub lr_backbone: f64,
    pub freeze: FreezePolicy,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            iterations: 200,
            train_resolution: 64,
            lr_main: 2e-4,
            lr_backbone: 2e-6,
            freeze: FreezePolicy::default(),
            seed: 0,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if patch_size == 0 || self.train_resolution % patch_size != 0 {
            return Err(Error::Config(format!(
                "train_resolution {} not divisible by patch size {patch_size}",
                self.train_resolution
            )));
        }
        if self.log_every < 1 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub image: Array3<f64>,
    pub mask: SegmentationMask,
}

impl TrainingSample {
    /// Image resized bilinearly, mask by nearest-neighbor.
    pub fn resized(&self, resolution: usize) -> TrainingSample {
        TrainingSample {
            image: imageio::bilinear_resize(&self.image, resolution, resolution),
            mask: SegmentationMask {
                labels: imageio::nearest_resize(&self.mask.labels, resolution, resolution),
                ignore_label: self.mask.ignore_label,
            },
        }
    }
}

/// Remaps kept classes to contiguous ids in `keep` order; every other
/// label becomes the ignore label.
pub fn filter_subset(
    raw_mask: &Array2<u8>,
    keep: &ClassVocabulary,
    raw_vocab: &ClassVocabulary,
) -> Result<Array2<u8>> {
    let mut map = vec![IGNORE_LABEL; raw_vocab.len()];
    for (new_id, name) in keep.names().iter().enumerate() {
        let raw_id = raw_vocab.index_of(name).ok_or_else(|| {
            Error::Config(format!("keep class '{name}' absent from the raw vocabulary"))
        })?;
        map[raw_id] = new_id as u8;
    }
    let mut out = raw_mask.clone();
    for v in out.iter_mut() {
        if *v == IGNORE_LABEL {
            continue;
        }
        if (*v as usize) >= raw_vocab.len() {
            return Err(Error::Validation(format!(
                "raw label {v} out of range for a {}-class vocabulary",
                raw_vocab.len()
            )));
        }
        *v = map[*v as usize];
    }
    Ok(out)
}

/// Uniform sample of `size` classes without replacement, reproducible
/// from `seed`; raw ordering is preserved in the result.
pub fn sample_random_subset(
    raw_vocab: &ClassVocabulary,
    size: usize,
    seed: u64,
) -> Result<ClassVocabulary> {
    if size < 1 || size > raw_vocab.len() {
        return Err(Error::Validation(format!(
            "subset size {size} out of range 1..={}",
            raw_vocab.len()
        )));
    }
    let mut rng = component_rng(seed, "subset");
    let mut idx: Vec<usize> =
        rand::seq::index::sample(&mut rng, raw_vocab.len(), size).into_vec();
    idx.sort_unstable();
    ClassVocabulary::new(idx.into_iter().map(|i| raw_vocab.name(i).to_string()).collect())
}

/// Loss value with its score gradient and ignore bookkeeping.
pub struct LossOutput {
    pub loss: f64,
    /// d(loss)/d(scores), same shape as the score maps.
    pub grad: Array3<f64>,
    pub valid_pixels: usize,
    /// True when every pixel was ignored (loss defined as 0).
    pub all_ignored: bool,
}

/// Mean per-pixel softmax cross-entropy. Pixels whose label is the
/// ignore value or outside `[0, M)` contribute neither loss nor
/// gradient.
pub fn compute_loss(scores: &ScoreMaps, mask: &SegmentationMask) -> Result<LossOutput> {
    let (h, w, m) = (
        scores.values.shape()[0],
        scores.values.shape()[1],
        scores.values.shape()[2],
    );
    if mask.labels.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "mask {:?} does not match score maps {h}x{w}",
            mask.labels.shape()
        )));
    }
    let mut grad = Array3::zeros((h, w, m));
    let mut loss = 0.0;
    let mut valid = 0usize;
    for y in 0..h {
        for x in 0..w {
            let l = mask.labels[(y, x)];
            if l == mask.ignore_label || (l as usize) >= m {
                continue;
            }
            valid += 1;
            let mut maxv = f64::NEG_INFINITY;
            for i in 0..m {
                maxv = maxv.max(scores.values[(y, x, i)]);
            }
            let mut z = 0.0;
            for i in 0..m {
                z += (scores.values[(y, x, i)] - maxv).exp();
            }
            loss -= (scores.values[(y, x, l as usize)] - maxv) - z.ln();
            for i in 0..m {
                let p = (scores.values[(y, x, i)] - maxv).exp() / z;
                grad[(y, x, i)] = p - if i as u8 == l { 1.0 } else { 0.0 };
            }
        }
    }
    if valid == 0 {
        return Ok(LossOutput { loss: 0.0, grad, valid_pixels: 0, all_ignored: true });
    }
    loss /= valid as f64;
    grad /= valid as f64;
    Ok(LossOutput { loss, grad, valid_pixels: valid, all_ignored: false })
}

pub struct StepOutcome {
    pub loss: f64,
    /// Samples in the batch whose pixels were all ignored.
    pub all_ignored_samples: usize,
}

/// One optimizer step over a batch. Gradients flow through the full
/// differentiable path; the freeze policy and parameter kinds gate
/// which tensors actually move. The upsampler has no parameters and is
/// untouched by construction.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    batch: &[TrainingSample],
    cfg: &TrainConfig,
    vocab: &ClassVocabulary,
    templates: &PromptTemplateSet,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    model.zero_grads();
    let (emb, ecache) = model.embed_classes_cached(vocab, templates)?;
    let inv_b = 1.0 / batch.len() as f64;
    let mut total_loss = 0.0;
    let mut warned = 0usize;
    let mut gembed = Array2::zeros(emb.raw_dim());
    for sample in batch {
        let (scores, fcache) = model.forward(&sample.image, &emb)?;
        let lo = compute_loss(&scores, &sample.mask)?;
        if lo.all_ignored {
            warned += 1;
        }
        total_loss += lo.loss * inv_b;
        let gscores = &lo.grad * inv_b;
        gembed += &model.backward(&fcache, &gscores);
    }
    model.embed_classes_backward(&ecache, &gembed);

    if !total_loss.is_finite() {
        return Err(Error::Training(format!("non-finite loss {total_loss}; aborting")));
    }

    let (freeze, lr_main, lr_backbone) = (cfg.freeze, cfg.lr_main, cfg.lr_backbone);
    model.visit("", &mut |name, kind, p| {
        if kind != ParamKind::Trainable || !freeze.allows(name) {
            return;
        }
        let lr = if name.starts_with("backbone.") { lr_backbone } else { lr_main };
        opt.update(name, p, lr);
    });
    Ok(StepOutcome { loss: total_loss, all_ignored_samples: warned })
}

/// Owns the mutable training state and the batch-sampling stream.
pub struct Trainer {
    pub model: Model,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    pub vocab: ClassVocabulary,
    pub templates: PromptTemplateSet,
}

impl Trainer {
    pub fn new(
        model: Model,
        cfg: TrainConfig,
        vocab: ClassVocabulary,
        templates: PromptTemplateSet,
    ) -> Result<Self> {
        cfg.validate(model.cfg.patch_size)?;
        Ok(Self { model, opt: AdamW::default(), cfg, vocab, templates })
    }

    /// Runs the configured number of iterations over `data`, sampling
    /// batches with replacement, logging `step<TAB>loss` lines, and
    /// returning the loss sequence.
    pub fn run(&mut self, data: &[TrainingSample], log: &mut dyn Write) -> Result<Vec<f64>> {
        self.run_with(data, log, |_, _| Ok(()))
    }

    /// [`run`](Self::run) with a hook invoked after every completed
    /// step, e.g. for interval checkpointing.
    pub fn run_with(
        &mut self,
        data: &[TrainingSample],
        log: &mut dyn Write,
        mut on_step: impl FnMut(usize, &mut Model) -> Result<()>,
    ) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::Validation("training dataset is empty".into()));
        }
        let resized: Vec<TrainingSample> =
            data.iter().map(|s| s.resized(self.cfg.train_resolution)).collect();
        let mut rng = component_rng(self.cfg.seed, "batches");
        let mut losses = Vec::with_capacity(self.cfg.iterations);
        for step in 0..self.cfg.iterations {
            let batch: Vec<TrainingSample> = (0..self.cfg.batch_size)
                .map(|_| resized[rng.random_range(0..resized.len())].clone())
                .collect();
            let out = train_step(
                &mut self.model,
                &mut self.opt,
                &batch,
                &self.cfg,
                &self.vocab,
                &self.templates,
            )?;
            losses.push(out.loss);
            if step % self.cfg.log_every == 0 {
                writeln!(log, "{step}\t{:.6}", out.loss)?;
                log.flush()?;
            }
            on_step(step, &mut self.model)?;
        }
        Ok(losses)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub resolution: usize,
    pub num_images: usize,
    /// Shape corners snap to this grid so coarse feature maps can
    /// represent the boundaries.
    pub snap: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { resolution: 64, num_images: 16, snap: 8 }
    }
}

/// Names for the three synthetic classes, usable as prompts.
pub fn synthetic_class_names() -> Vec<String> {
    vec!["slate".into(), "ember".into(), "moss".into()]
}

/// Seeded 3-class shape dataset: a dark background, one warm
/// rectangle, one green disc, with mild pixel noise. Class identity
/// correlates with color so the toy encoders can separate them.
pub fn synthetic_dataset(seed: u64, cfg: &SyntheticConfig) -> Vec<TrainingSample> {
    let mut rng = component_rng(seed, "synthetic");
    let res = cfg.resolution;
    let snap = cfg.snap.max(1);
    let cells = (res / snap).max(2);
    let base: [[f64; 3]; 3] =
        [[0.20, 0.24, 0.30], [0.82, 0.33, 0.21], [0.22, 0.72, 0.34]];
    let mut out = Vec::with_capacity(cfg.num_images);
    for _ in 0..cfg.num_images {
        let mut labels = Array2::zeros((res, res));

        let rw = rng.random_range(1..=cells / 2) * snap;
        let rh = rng.random_range(1..=cells / 2) * snap;
        let ry = rng.random_range(0..=(res - rh) / snap) * snap;
        let rx = rng.random_range(0..=(res - rw) / snap) * snap;
        for y in ry..ry + rh {
            for x in rx..rx + rw {
                labels[(y, x)] = 1;
            }
        }

        let r = rng.random_range(1..=cells / 2) * snap / 2;
        let cy = rng.random_range(r..res - r);
        let cx = rng.random_range(r..res - r);
        for y in 0..res {
            for x in 0..res {
                let dy = y as i64 - cy as i64;
                let dx = x as i64 - cx as i64;
                if dy * dy + dx * dx <= (r as i64) * (r as i64) {
                    labels[(y, x)] = 2;
                }
            }
        }

        let image = Array3::from_shape_fn((res, res, 3), |(y, x, c)| {
            let b = base[labels[(y, x)] as usize][c];
            (b + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0)
        });
        out.push(TrainingSample { image, mask: SegmentationMask::new(labels) });
    }
    out
}

/// Loads `images/<name>.<ext>` + `masks/<name>.<ext>` pairs from a
/// dataset directory. Images without a mask are recorded in `skipped`.
pub struct DirDataset {
    pub names: Vec<String>,
    pub samples: Vec<TrainingSample>,
    pub skipped: Vec<String>,
}

pub fn load_dir_dataset(dir: &Path) -> Result<DirDataset> {
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    if !images_dir.is_dir() {
        return Err(Error::Validation(format!(
            "missing images directory under {}",
            dir.display()
        )));
    }
    let mut entries: Vec<_> = std::fs::read_dir(&images_dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Validation(format!(
            "no images found under {}",
            images_dir.display()
        )));
    }
    let mut ds = DirDataset { names: Vec::new(), samples: Vec::new(), skipped: Vec::new() };
    for path in entries {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Validation(format!("unreadable file name {}", path.display())))?
            .to_string();
        let mask_path = ["png", "bmp", "tif", "tiff", "jpg"]
            .iter()
            .map(|ext| masks_dir.join(format!("{stem}.{ext}")))
            .find(|p| p.is_file());
        let Some(mask_path) = mask_path else {
            ds.skipped.push(stem);
            continue;
        };
        let image = imageio::load_image(&path)?;
        let labels = imageio::load_mask(&mask_path)?;
        if labels.shape() != [image.shape()[0], image.shape()[1]] {
            return Err(Error::Validation(format!(
                "mask size {:?} does not match image for '{stem}'",
                labels.shape()
            )));
        }
        ds.names.push(stem);
        ds.samples.push(TrainingSample { image, mask: SegmentationMask::new(labels) });
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agg::AggregatorConfig;
    use crate::model::ModelConfig;
    use crate::nn::rel_err;
    use ndarray::arr2;

    fn tiny_model() -> Model {
        Model::new(ModelConfig {
            master_seed: 3,
            patch_size: 2,
            vision_dim: 4,
            text_table_size: 64,
            agg: AggregatorConfig {
                d_agg: 8,
                num_blocks: 1,
                window_size: 2,
                num_heads: 2,
                ..AggregatorConfig::default()
            },
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn tiny_vocab() -> ClassVocabulary {
        ClassVocabulary::new(synthetic_class_names()).unwrap()
    }

    fn tiny_data(seed: u64, n: usize) -> Vec<TrainingSample> {
        synthetic_dataset(seed, &SyntheticConfig { resolution: 8, num_images: n, snap: 2 })
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            iterations: 5,
            train_resolution: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn filter_subset_identity_when_keep_equals_raw() {
        let raw = ClassVocabulary::new(vec!["car".into(), "tree".into()]).unwrap();
        let mask = arr2(&[[0u8, 1], [255, 1]]);
        let out = filter_subset(&mask, &raw, &raw).unwrap();
        assert_eq!(out, mask);
    }

    #[test]
    fn filter_subset_remaps_and_ignores() {
        let raw =
            ClassVocabulary::new(vec!["car".into(), "pizza".into(), "tree".into()]).unwrap();
        let keep = ClassVocabulary::new(vec!["car".into(), "tree".into()]).unwrap();
        let mask = arr2(&[[0u8, 1], [2, 255]]);
        let out = filter_subset(&mask, &keep, &raw).unwrap();
        assert_eq!(out, arr2(&[[0u8, 255], [1, 255]]));
    }

    #[test]
    fn filter_subset_unknown_keep_class_is_config_error() {
        let raw = ClassVocabulary::new(vec!["car".into()]).unwrap();
        let keep = ClassVocabulary::new(vec!["boat".into()]).unwrap();
        let mask = arr2(&[[0u8]]);
        assert!(matches!(filter_subset(&mask, &keep, &raw), Err(Error::Config(_))));
    }

    #[test]
    fn filter_subset_rejects_out_of_range_raw_labels() {
        let raw = ClassVocabulary::new(vec!["car".into()]).unwrap();
        let mask = arr2(&[[9u8]]);
        assert!(matches!(filter_subset(&mask, &raw, &raw), Err(Error::Validation(_))));
    }

    #[test]
    fn random_subset_full_size_is_identity() {
        let raw = ClassVocabulary::coco_rs_subset();
        let sub = sample_random_subset(&raw, raw.len(), 7).unwrap();
        assert_eq!(sub.names(), raw.names());
    }

    #[test]
    fn random_subset_is_reproducible_and_distinct() {
        let raw = ClassVocabulary::coco_rs_subset();
        let a = sample_random_subset(&raw, 10, 42).unwrap();
        let b = sample_random_subset(&raw, 10, 42).unwrap();
        assert_eq!(a.names(), b.names());
        assert_eq!(a.len(), 10);
        let c = sample_random_subset(&raw, 10, 43).unwrap();
        assert_ne!(a.names(), c.names());
    }

    #[test]
    fn random_subset_size_out_of_range_rejected() {
        let raw = ClassVocabulary::coco_rs_subset();
        assert!(sample_random_subset(&raw, 0, 1).is_err());
        assert!(sample_random_subset(&raw, raw.len() + 1, 1).is_err());
    }

    #[test]
    fn uniform_scores_give_ln_m() {
        let scores = ScoreMaps { values: Array3::from_elem((3, 3, 5), 0.4) };
        let mask = SegmentationMask::new(Array2::from_elem((3, 3), 2));
        let out = compute_loss(&scores, &mask).unwrap();
        assert!((out.loss - (5.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_scores_give_near_zero_loss() {
        let mut values = Array3::zeros((2, 2, 3));
        values.slice_mut(ndarray::s![.., .., 1]).fill(30.0);
        let mask = SegmentationMask::new(Array2::from_elem((2, 2), 1));
        let out = compute_loss(&ScoreMaps { values }, &mask).unwrap();
        assert!(out.loss < 1e-3);
    }

    #[test]
    fn loss_matches_scalar_oracle() {
        let mut rng = component_rng(5, "loss");
        let values = Array3::from_shape_fn((2, 2, 2), |_| rng.random_range(-2.0..2.0));
        let labels = arr2(&[[0u8, 1], [1, 0]]);
        let out = compute_loss(
            &ScoreMaps { values: values.clone() },
            &SegmentationMask::new(labels.clone()),
        )
        .unwrap();
        let mut want = 0.0;
        for y in 0..2 {
            for x in 0..2 {
                let (a, b) = (values[(y, x, 0)], values[(y, x, 1)]);
                let z = a.exp() + b.exp();
                let p = if labels[(y, x)] == 0 { a.exp() / z } else { b.exp() / z };
                want -= p.ln();
            }
        }
        want /= 4.0;
        assert!((out.loss - want).abs() < 1e-6);
    }

    #[test]
    fn all_ignored_pixels_flagged_with_zero_loss() {
        let scores = ScoreMaps { values: Array3::zeros((2, 2, 3)) };
        let mask = SegmentationMask::new(Array2::from_elem((2, 2), IGNORE_LABEL));
        let out = compute_loss(&scores, &mask).unwrap();
        assert!(out.all_ignored);
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn out_of_range_labels_are_ignored_too() {
        let scores = ScoreMaps { values: Array3::zeros((1, 2, 2)) };
        let mask = SegmentationMask::new(arr2(&[[0u8, 9]]));
        let out = compute_loss(&scores, &mask).unwrap();
        assert_eq!(out.valid_pixels, 1);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = component_rng(6, "lossfd");
        let values = Array3::from_shape_fn((2, 2, 3), |_| rng.random_range(-1.0..1.0));
        let mut labels = Array2::zeros((2, 2));
        labels[(0, 1)] = 2;
        labels[(1, 0)] = IGNORE_LABEL;
        let mask = SegmentationMask::new(labels);
        let out = compute_loss(&ScoreMaps { values: values.clone() }, &mask).unwrap();
        let eps = 1e-6;
        for y in 0..2 {
            for x in 0..2 {
                for i in 0..3 {
                    let mut vp = values.clone();
                    vp[(y, x, i)] += eps;
                    let mut vm = values.clone();
                    vm[(y, x, i)] -= eps;
                    let lp = compute_loss(&ScoreMaps { values: vp }, &mask).unwrap().loss;
                    let lm = compute_loss(&ScoreMaps { values: vm }, &mask).unwrap().loss;
                    let fd = (lp - lm) / (2.0 * eps);
                    assert!(rel_err(out.grad[(y, x, i)], fd) < 1e-3);
                }
            }
        }
    }

    #[test]
    fn ignored_label_value_does_not_matter() {
        let model = tiny_model();
        let vocab = tiny_vocab();
        let templates = PromptTemplateSet::default_set();
        let emb = model.embed_classes(&vocab, &templates).unwrap();
        let data = tiny_data(1, 1);
        let (scores, _) = model.forward(&data[0].image, &emb).unwrap();

        let mut m1 = data[0].mask.labels.clone();
        m1[(0, 0)] = IGNORE_LABEL;
        m1[(3, 3)] = IGNORE_LABEL;
        let mut m2 = m1.clone();
        m2[(3, 3)] = 200; // a different ignored value

        let a = compute_loss(&scores, &SegmentationMask::new(m1)).unwrap();
        let b = compute_loss(&scores, &SegmentationMask::new(m2)).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grad, b.grad);
    }

    fn snapshot(model: &mut Model) -> Vec<(String, ndarray::ArrayD<f64>)> {
        let mut v = Vec::new();
        model.visit("", &mut |name, _, p| v.push((name.to_string(), p.value.clone())));
        v
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut model = tiny_model();
        let mut opt = AdamW::default();
        let vocab = tiny_vocab();
        let templates = PromptTemplateSet::default_set();
        let cfg = TrainConfig { lr_main: 0.0, lr_backbone: 0.0, ..tiny_cfg() };
        let data = tiny_data(2, 2);
        let before = snapshot(&mut model);
        let out =
            train_step(&mut model, &mut opt, &data, &cfg, &vocab, &templates).unwrap();
        assert!(out.loss.is_finite() && out.loss > 0.0);
        assert_eq!(before, snapshot(&mut model));
    }

    #[test]
    fn freeze_policy_keeps_backbone_bits() {
        let vocab = tiny_vocab();
        let templates = PromptTemplateSet::default_set();
        let data = tiny_data(3, 2);
        let cfg = TrainConfig {
            freeze: FreezePolicy {
                last_two_vision_blocks_trainable: false,
                text_encoder_trainable: false,
            },
            ..tiny_cfg()
        };
        let mut model = tiny_model();
        let mut opt = AdamW::default();
        let before = snapshot(&mut model);
        for _ in 0..3 {
            train_step(&mut model, &mut opt, &data, &cfg, &vocab, &templates).unwrap();
        }
        let after = snapshot(&mut model);
        let mut saw_change = false;
        for ((name, a), (_, b)) in before.iter().zip(after.iter()) {
            if name.starts_with("backbone.") {
                assert_eq!(a, b, "{name} moved despite freeze");
            } else if a != b {
                saw_change = true;
            }
        }
        assert!(saw_change, "aggregator/reduce should have trained");
    }

    #[test]
    fn training_is_deterministic() {
        let vocab = tiny_vocab();
        let templates = PromptTemplateSet::default_set();
        let data = tiny_data(4, 3);
        let run = || -> Vec<f64> {
            let mut trainer = Trainer::new(
                tiny_model(),
                tiny_cfg(),
                vocab.clone(),
                templates.clone(),
            )
            .unwrap();
            let mut log = Vec::new();
            trainer.run(&data, &mut log).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), 5);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn loss_trends_down_when_overfitting() {
        let vocab = tiny_vocab();
        let templates = PromptTemplateSet::default_set();
        let data = tiny_data(5, 1);
        let cfg = TrainConfig { batch_size: 1, iterations: 30, ..tiny_cfg() };
        let mut trainer =
            Trainer::new(tiny_model(), cfg, vocab, templates).unwrap();
        let mut log = Vec::new();
        let losses = trainer.run(&data, &mut log).unwrap();
        assert!(losses.last().unwrap() < losses.first().unwrap());
        let text = String::from_utf8(log).unwrap();
        assert_eq!(text.lines().count(), 30);
        assert!(text.lines().next().unwrap().starts_with("0\t"));
    }

    #[test]
    fn synthetic_dataset_is_valid_and_seeded() {
        let cfg = SyntheticConfig::default();
        let a = synthetic_dataset(9, &cfg);
        let b = synthetic_dataset(9, &cfg);
        assert_eq!(a.len(), 16);
        for (sa, sb) in a.iter().zip(b.iter()) {
            assert_eq!(sa.image, sb.image);
            assert_eq!(sa.mask.labels, sb.mask.labels);
            sa.mask.validate(3).unwrap();
        }
        let labels: std::collections::BTreeSet<u8> =
            a.iter().flat_map(|s| s.mask.labels.iter().cloned()).collect();
        assert!(labels.contains(&0) && labels.contains(&1) && labels.contains(&2));
    }

    #[test]
    fn dir_dataset_roundtrip_and_skips() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::create_dir_all(dir.path().join("masks")).unwrap();
        let data = tiny_data(6, 2);
        for (i, s) in data.iter().enumerate() {
            imageio::save_image(&dir.path().join(format!("images/s{i}.png")), &s.image)
                .unwrap();
        }
        imageio::save_mask(&dir.path().join("masks/s0.png"), &data[0].mask.labels).unwrap();
        let ds = load_dir_dataset(dir.path()).unwrap();
        assert_eq!(ds.names, vec!["s0".to_string()]);
        assert_eq!(ds.skipped, vec!["s1".to_string()]);
        assert_eq!(ds.samples[0].mask.labels, data[0].mask.labels);
    }

    #[test]
    fn empty_dataset_dir_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        assert!(load_dir_dataset(dir.path()).is_err());
    }
}
