//! Full-image prediction: resize to the evaluation resolution, tile
//! with overlapping windows, mean-merge the per-window score maps, and
//! resize the argmax mask back to the input resolution.

use ndarray::{s, Array2, Array3};

use crate::error::{Error, Result};
use crate::imageio::{bilinear_resize, nearest_resize};
use crate::model::Model;
use crate::upsample::{argmax_mask, ScoreMaps, SegmentationMask};

#[derive(Debug, Clone, Copy)]
pub struct SlidingWindowConfig {
    pub eval_resolution: usize,
    pub window: usize,
    pub stride: usize,
}

impl Default for SlidingWindowConfig {
    fn default() -> Self {
        Self { eval_resolution: 512, window: 224, stride: 112 }
    }
}

impl SlidingWindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 1 || self.window > self.eval_resolution {
            return Err(Error::Config(format!(
                "window {} must be in 1..={}",
                self.window, self.eval_resolution
            )));
        }
        if self.stride < 1 || self.stride > self.window {
            return Err(Error::Config(format!(
                "stride {} must be in 1..={}",
                self.stride, self.window
            )));
        }
        Ok(())
    }
}

/// Window start offsets along one axis: multiples of `stride`, with
/// the last one clamped so the final window ends exactly at `extent`.
pub fn window_positions(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    debug_assert!(window <= extent);
    let last = extent - window;
    let mut out = Vec::new();
    let mut pos = 0;
    loop {
        out.push(pos.min(last));
        if pos >= last {
            break;
        }
        pos += stride;
    }
    out.dedup();
    out
}

/// Row-major grid of 2D window origins.
pub fn window_grid(h: usize, w: usize, window: usize, stride: usize) -> Vec<(usize, usize)> {
    let ys = window_positions(h, window, stride);
    let xs = window_positions(w, window, stride);
    let mut out = Vec::with_capacity(ys.len() * xs.len());
    for &y in &ys {
        for &x in &xs {
            out.push((y, x));
        }
    }
    out
}

/// Per-pixel count of covering windows.
pub fn coverage_map(h: usize, w: usize, window: usize, stride: usize) -> Array2<u32> {
    let mut cover = Array2::zeros((h, w));
    for (oy, ox) in window_grid(h, w, window, stride) {
        let mut patch = cover.slice_mut(s![oy..oy + window, ox..ox + window]);
        patch += 1;
    }
    cover
}

/// Centered reflect padding (border not repeated) up to the target
/// size. Requires pad amounts smaller than the source extent.
pub fn reflect_pad(image: &Array3<f64>, th: usize, tw: usize) -> Result<Array3<f64>> {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if th < h || tw < w {
        return Err(Error::Validation("reflect_pad cannot shrink".into()));
    }
    if th >= 2 * h || tw >= 2 * w {
        return Err(Error::Validation(format!(
            "image {h}x{w} too small to reflect-pad to {th}x{tw}"
        )));
    }
    let (top, left) = ((th - h) / 2, (tw - w) / 2);
    let reflect = |i: i64, n: usize| -> usize {
        let n = n as i64;
        let j = if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i };
        j as usize
    };
    Ok(Array3::from_shape_fn((th, tw, c), |(y, x, ch)| {
        let sy = reflect(y as i64 - top as i64, h);
        let sx = reflect(x as i64 - left as i64, w);
        image[(sy, sx, ch)]
    }))
}

/// Mean-merged score maps over the given windows. The accumulation is
/// additive, so results do not depend on window order beyond float
/// rounding.
pub fn merged_scores(
    model: &Model,
    image: &Array3<f64>,
    embeddings: &ndarray::Array2<f64>,
    windows: &[(usize, usize)],
    window: usize,
) -> Result<(Array3<f64>, Array2<u32>)> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let m = embeddings.nrows();
    let mut acc = Array3::zeros((h, w, m));
    let mut cover: Array2<u32> = Array2::zeros((h, w));
    for &(oy, ox) in windows {
        let tile = image.slice(s![oy..oy + window, ox..ox + window, ..]).to_owned();
        let scores = model.score_maps(&tile, embeddings)?;
        let mut dst = acc.slice_mut(s![oy..oy + window, ox..ox + window, ..]);
        dst += &scores.values;
        let mut cv = cover.slice_mut(s![oy..oy + window, ox..ox + window]);
        cv += 1;
    }
    for y in 0..h {
        for x in 0..w {
            let n = cover[(y, x)];
            if n > 1 {
                for i in 0..m {
                    acc[(y, x, i)] /= n as f64;
                }
            }
        }
    }
    Ok((acc, cover))
}

/// Sliding-window score maps at evaluation resolution, with the
/// coverage buffer for inspection. Falls back to a single reflect-
/// padded window when the image is smaller than the window.
pub fn eval_scores(
    model: &Model,
    eval_image: &Array3<f64>,
    embeddings: &ndarray::Array2<f64>,
    window: usize,
    stride: usize,
) -> Result<(Array3<f64>, Array2<u32>)> {
    let (h, w) = (eval_image.shape()[0], eval_image.shape()[1]);
    if window % model.cfg.patch_size != 0 {
        return Err(Error::Config(format!(
            "window {window} not divisible by patch size {}",
            model.cfg.patch_size
        )));
    }
    if h < window || w < window {
        let th = h.max(window);
        let tw = w.max(window);
        let padded = reflect_pad(eval_image, th, tw)?;
        let (scores, cover) =
            merged_scores(model, &padded, embeddings, &window_grid(th, tw, window, stride), window)?;
        let (top, left) = ((th - h) / 2, (tw - w) / 2);
        return Ok((
            scores.slice(s![top..top + h, left..left + w, ..]).to_owned(),
            cover.slice(s![top..top + h, left..left + w]).to_owned(),
        ));
    }
    merged_scores(model, eval_image, embeddings, &window_grid(h, w, window, stride), window)
}

/// Resize to the evaluation resolution, tile, merge, argmax, and
/// resize the labels back to the input resolution.
pub fn predict_full(
    model: &Model,
    image: &Array3<f64>,
    embeddings: &ndarray::Array2<f64>,
    cfg: &SlidingWindowConfig,
) -> Result<SegmentationMask> {
    cfg.validate()?;
    let (h0, w0) = (image.shape()[0], image.shape()[1]);
    let eval_image = bilinear_resize(image, cfg.eval_resolution, cfg.eval_resolution);
    let (scores, cover) =
        eval_scores(model, &eval_image, embeddings, cfg.window, cfg.stride)?;
    debug_assert!(cover.iter().all(|&c| c >= 1));
    let mask = argmax_mask(&ScoreMaps { values: scores });
    Ok(SegmentationMask {
        labels: nearest_resize(&mask.labels, h0, w0),
        ignore_label: mask.ignore_label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agg::AggregatorConfig;
    use crate::model::{Model, ModelConfig};
    use crate::nn::component_rng;
    use crate::vocab::{ClassVocabulary, PromptTemplateSet};
    use rand::Rng;

    fn tiny_model() -> Model {
        Model::new(ModelConfig {
            master_seed: 11,
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

    fn tiny_embeddings(model: &Model) -> ndarray::Array2<f64> {
        let vocab = ClassVocabulary::new(vec!["tree".into(), "water".into()]).unwrap();
        model.embed_classes(&vocab, &PromptTemplateSet::default_set()).unwrap()
    }

    fn rand_image(seed: u64, h: usize, w: usize) -> Array3<f64> {
        let mut rng = component_rng(seed, "img");
        Array3::from_shape_fn((h, w, 3), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn full_scale_protocol_positions() {
        assert_eq!(window_positions(512, 224, 112), vec![0, 112, 224, 288]);
        assert_eq!(window_positions(224, 224, 112), vec![0]);
        assert_eq!(window_positions(448, 224, 224), vec![0, 224]);
    }

    #[test]
    fn positions_cover_every_pixel() {
        for (extent, window, stride) in
            [(512, 224, 112), (100, 30, 7), (64, 16, 16), (65, 16, 16), (10, 10, 1)]
        {
            let pos = window_positions(extent, window, stride);
            assert_eq!(pos[0], 0);
            assert_eq!(pos.last().unwrap() + window, extent);
            let mut covered = vec![false; extent];
            for &p in &pos {
                for v in covered.iter_mut().skip(p).take(window) {
                    *v = true;
                }
            }
            assert!(covered.iter().all(|&c| c), "({extent},{window},{stride})");
        }
    }

    #[test]
    fn full_scale_protocol_coverage_counts() {
        let cover = coverage_map(512, 512, 224, 112);
        assert_eq!(cover[(0, 0)], 1);
        assert_eq!(*cover.iter().min().unwrap(), 1);
        assert_eq!(*cover.iter().max().unwrap(), 9);
    }

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        let img = Array3::from_shape_fn((3, 3, 1), |(y, x, _)| (y * 3 + x) as f64);
        let out = reflect_pad(&img, 5, 5).unwrap();
        assert_eq!(out.shape(), &[5, 5, 1]);
        // center copy intact
        assert_eq!(out[(1, 1, 0)], img[(0, 0, 0)]);
        // row above the top edge mirrors row 1, not row 0
        assert_eq!(out[(0, 1, 0)], img[(1, 0, 0)]);
        assert_eq!(out[(4, 4, 0)], img[(1, 1, 0)]);
    }

    #[test]
    fn single_window_equals_single_pass_bit_exact() {
        let model = tiny_model();
        let emb = tiny_embeddings(&model);
        let image = rand_image(1, 8, 8);
        let (scores, cover) = eval_scores(&model, &image, &emb, 8, 4).unwrap();
        assert!(cover.iter().all(|&c| c == 1));
        let direct = model.score_maps(&image, &emb).unwrap();
        assert_eq!(scores, direct.values);
    }

    #[test]
    fn disjoint_tiles_match_tile_oracle() {
        let model = tiny_model();
        let emb = tiny_embeddings(&model);
        let image = rand_image(2, 8, 8);
        // stride == window: no overlap
        let (scores, cover) = eval_scores(&model, &image, &emb, 4, 4).unwrap();
        assert!(cover.iter().all(|&c| c == 1));
        for (oy, ox) in window_grid(8, 8, 4, 4) {
            let tile = image.slice(s![oy..oy + 4, ox..ox + 4, ..]).to_owned();
            let want = model.score_maps(&tile, &emb).unwrap();
            let got = scores.slice(s![oy..oy + 4, ox..ox + 4, ..]);
            assert_eq!(got, want.values.view());
        }
    }

    #[test]
    fn merge_is_window_order_independent() {
        let model = tiny_model();
        let emb = tiny_embeddings(&model);
        let image = rand_image(3, 8, 8);
        let grid = window_grid(8, 8, 4, 2);
        assert!(grid.len() > 4);
        let (a, _) = merged_scores(&model, &image, &emb, &grid, 4).unwrap();
        let rev: Vec<_> = grid.into_iter().rev().collect();
        let (b, _) = merged_scores(&model, &image, &emb, &rev, 4).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn undersized_image_takes_reflect_path() {
        let model = tiny_model();
        let emb = tiny_embeddings(&model);
        let image = rand_image(4, 6, 6);
        let (scores, cover) = eval_scores(&model, &image, &emb, 8, 8).unwrap();
        assert_eq!(scores.shape(), &[6, 6, 2]);
        assert!(cover.iter().all(|&c| c == 1));
    }

    #[test]
    fn predict_full_returns_original_resolution() {
        let model = tiny_model();
        let emb = tiny_embeddings(&model);
        let image = rand_image(5, 10, 14);
        let cfg = SlidingWindowConfig { eval_resolution: 8, window: 4, stride: 2 };
        let mask = predict_full(&model, &image, &emb, &cfg).unwrap();
        assert_eq!(mask.labels.shape(), &[10, 14]);
        mask.validate(2).unwrap();
    }

    #[test]
    fn config_validation() {
        assert!(SlidingWindowConfig::default().validate().is_ok());
        assert!(SlidingWindowConfig { eval_resolution: 100, window: 101, stride: 1 }
            .validate()
            .is_err());
        assert!(SlidingWindowConfig { eval_resolution: 100, window: 50, stride: 0 }
            .validate()
            .is_err());
        assert!(SlidingWindowConfig { eval_resolution: 100, window: 50, stride: 51 }
            .validate()
            .is_err());
    }
}
