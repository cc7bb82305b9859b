//! Cosine-similarity cost volume between dense descriptors and class
//! embeddings, plus its backward pass and grayscale export.
//!
//! `values[j,k,i]` is the raw cosine between the descriptor at grid
//! cell (j,k) and class embedding i; no temperature or sharpening is
//! applied here. Class order follows the vocabulary index.

use ndarray::{s, Array1, Array2, Array3, ArrayView1};

use crate::backbone::DenseDescriptorField;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CostVolume {
    /// `(h, w, M)` cosine scores.
    pub values: Array3<f64>,
}

impl CostVolume {
    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[2])
    }

    pub fn num_classes(&self) -> usize {
        self.values.shape()[2]
    }
}

pub fn cosine_sim(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine inputs differ in dimension: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::Degenerate("cosine of a zero-magnitude vector".into()));
    }
    Ok(a.dot(&b) / (na * nb))
}

/// Gradients of `s = cos(a, b)` with respect to both inputs:
/// `ds/da = b/(|a||b|) - s a/|a|^2`, symmetric in `b`.
pub fn cosine_sim_backward(
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
    gs: f64,
) -> (Array1<f64>, Array1<f64>) {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    let s = a.dot(&b) / (na * nb);
    let ga = b.mapv(|v| v / (na * nb)) - a.mapv(|v| v * s / (na * na));
    let gb = a.mapv(|v| v / (na * nb)) - b.mapv(|v| v * s / (nb * nb));
    (ga.mapv(|v| v * gs), gb.mapv(|v| v * gs))
}

/// `embeddings` is `(M, 2D)`, one unit-normalized row per class.
pub fn build_cost_volume(
    field: &DenseDescriptorField,
    embeddings: &Array2<f64>,
) -> Result<CostVolume> {
    let (h, w, dd) = (field.shape()[0], field.shape()[1], field.shape()[2]);
    let m = embeddings.nrows();
    if m == 0 {
        return Err(Error::Validation("cost volume needs at least one class".into()));
    }
    if embeddings.ncols() != dd {
        return Err(Error::Shape(format!(
            "descriptor dimension {dd} does not match embedding dimension {}",
            embeddings.ncols()
        )));
    }
    let mut values = Array3::zeros((h, w, m));
    for j in 0..h {
        for k in 0..w {
            let cell = field.slice(s![j, k, ..]);
            for i in 0..m {
                values[(j, k, i)] = cosine_sim(cell, embeddings.row(i))?;
            }
        }
    }
    Ok(CostVolume { values })
}

/// Backward of [`build_cost_volume`]: scatters `gvalues` into gradients
/// for the descriptor field and the embedding matrix.
pub fn build_cost_volume_backward(
    field: &DenseDescriptorField,
    embeddings: &Array2<f64>,
    gvalues: &Array3<f64>,
) -> (Array3<f64>, Array2<f64>) {
    let (h, w, dd) = (field.shape()[0], field.shape()[1], field.shape()[2]);
    let m = embeddings.nrows();
    let mut gfield = Array3::zeros((h, w, dd));
    let mut gemb = Array2::zeros((m, dd));
    for j in 0..h {
        for k in 0..w {
            let cell = field.slice(s![j, k, ..]);
            for i in 0..m {
                let gs = gvalues[(j, k, i)];
                if gs == 0.0 {
                    continue;
                }
                let (ga, gb) = cosine_sim_backward(cell, embeddings.row(i), gs);
                let mut gcell = gfield.slice_mut(s![j, k, ..]);
                gcell += &ga;
                let mut grow = gemb.row_mut(i);
                grow += &gb;
            }
        }
    }
    (gfield, gemb)
}

/// Min-max normalizes one class slice to 8-bit grayscale. A constant
/// map renders mid-gray (128).
pub fn costmap_to_gray(volume: &CostVolume, class_index: usize) -> Array2<u8> {
    let (h, w, _) = volume.shape();
    let slice = volume.values.slice(s![.., .., class_index]);
    let lo = slice.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Array2::from_shape_fn((h, w), |(j, k)| {
        let v = if span < 1e-12 { 0.5 } else { (slice[(j, k)] - lo) / span };
        (v * 255.0).round().clamp(0.0, 255.0) as u8
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn self_similarity_is_one() {
        let v = arr1(&[0.3, -0.7, 2.0]);
        assert!((cosine_sim(v.view(), v.view()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_is_zero() {
        let a = arr1(&[1.0, 0.0]);
        let b = arr1(&[0.0, 1.0]);
        assert_eq!(cosine_sim(a.view(), b.view()).unwrap(), 0.0);
    }

    #[test]
    fn matches_scalar_oracle() {
        let a = arr1(&[1.0, 2.0, 3.0]);
        let b = arr1(&[4.0, 5.0, 6.0]);
        let got = cosine_sim(a.view(), b.view()).unwrap();
        let dot = 1.0 * 4.0 + 2.0 * 5.0 + 3.0 * 6.0;
        let na = (1.0f64 + 4.0 + 9.0).sqrt();
        let nb = (16.0f64 + 25.0 + 36.0).sqrt();
        assert!((got - dot / (na * nb)).abs() < 1e-9);
    }

    #[test]
    fn zero_vector_is_degenerate() {
        let a = arr1(&[0.0, 0.0]);
        let b = arr1(&[1.0, 0.0]);
        assert!(matches!(cosine_sim(a.view(), b.view()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let a = arr1(&[1.0, 0.0]);
        let b = arr1(&[1.0, 0.0, 0.0]);
        assert!(matches!(cosine_sim(a.view(), b.view()), Err(Error::Shape(_))));
    }

    #[test]
    fn identical_cell_and_embedding_gives_ones() {
        let e = arr1(&[0.6, 0.8]);
        let field = Array3::from_shape_fn((3, 2, 2), |(_, _, d)| e[d]);
        let emb = e.insert_axis(ndarray::Axis(0));
        let cv = build_cost_volume(&field, &emb).unwrap();
        assert!(cv.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn orthogonal_cells_give_zeros() {
        let field = Array3::from_shape_fn((2, 2, 2), |(_, _, d)| if d == 0 { 1.0 } else { 0.0 });
        let emb = arr1(&[0.0, 1.0]).insert_axis(ndarray::Axis(0));
        let cv = build_cost_volume(&field, &emb).unwrap();
        assert!(cv.values.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn matches_double_loop_oracle() {
        let field = Array3::from_shape_fn((2, 2, 4), |(j, k, d)| {
            ((j * 11 + k * 5 + d * 3) as f64 * 0.37).sin() + 0.1
        });
        let emb = Array2::from_shape_fn((2, 4), |(i, d)| ((i * 7 + d) as f64 * 0.53).cos() + 0.2);
        let cv = build_cost_volume(&field, &emb).unwrap();
        for j in 0..2 {
            for k in 0..2 {
                for i in 0..2 {
                    let mut dot = 0.0;
                    let mut na = 0.0;
                    let mut nb = 0.0;
                    for d in 0..4 {
                        dot += field[(j, k, d)] * emb[(i, d)];
                        na += field[(j, k, d)] * field[(j, k, d)];
                        nb += emb[(i, d)] * emb[(i, d)];
                    }
                    let want = dot / (na.sqrt() * nb.sqrt());
                    assert!((cv.values[(j, k, i)] - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn scale_invariance() {
        let field = Array3::from_shape_fn((2, 3, 4), |(j, k, d)| {
            ((j + 2 * k + 3 * d) as f64 * 0.29).sin() + 0.4
        });
        let emb = Array2::from_shape_fn((3, 4), |(i, d)| ((i + d) as f64 * 0.41).cos() + 0.3);
        let base = build_cost_volume(&field, &emb).unwrap();
        let scaled = build_cost_volume(&field.mapv(|v| v * 7.5), &emb.mapv(|v| v * 0.02)).unwrap();
        for (a, b) in base.values.iter().zip(scaled.values.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(base.values.iter().all(|v| v.abs() <= 1.0 + 1e-6));
    }

    #[test]
    fn class_permutation_equivariance() {
        let field = Array3::from_shape_fn((2, 2, 3), |(j, k, d)| {
            ((j * 3 + k * 7 + d) as f64 * 0.61).sin() + 0.2
        });
        let emb = Array2::from_shape_fn((3, 3), |(i, d)| ((i * 2 + d * 5) as f64 * 0.23).cos() + 0.2);
        let cv = build_cost_volume(&field, &emb).unwrap();
        let perm = [2usize, 0, 1];
        let emb_p = Array2::from_shape_fn((3, 3), |(i, d)| emb[(perm[i], d)]);
        let cv_p = build_cost_volume(&field, &emb_p).unwrap();
        for j in 0..2 {
            for k in 0..2 {
                for i in 0..3 {
                    assert_eq!(cv_p.values[(j, k, i)], cv.values[(j, k, perm[i])]);
                }
            }
        }
    }

    #[test]
    fn embedding_dimension_mismatch_rejected() {
        let field = Array3::ones((2, 2, 4));
        let emb = Array2::ones((1, 3));
        assert!(matches!(build_cost_volume(&field, &emb), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let field = Array3::from_shape_fn((2, 2, 3), |(j, k, d)| {
            ((j * 13 + k * 3 + d * 7) as f64 * 0.31).sin() + 0.5
        });
        let emb = Array2::from_shape_fn((2, 3), |(i, d)| ((i * 5 + d * 11) as f64 * 0.19).cos() + 0.4);
        let coeff = Array3::from_shape_fn((2, 2, 2), |(j, k, i)| {
            ((j + k * 2 + i * 4) as f64 * 0.43).sin()
        });
        let loss = |f: &Array3<f64>, e: &Array2<f64>| {
            (&build_cost_volume(f, e).unwrap().values * &coeff).sum()
        };
        let (gf, ge) = build_cost_volume_backward(&field, &emb, &coeff);

        let h = 1e-6;
        for j in 0..2 {
            for k in 0..2 {
                for d in 0..3 {
                    let mut fp = field.clone();
                    fp[(j, k, d)] += h;
                    let mut fm = field.clone();
                    fm[(j, k, d)] -= h;
                    let fd = (loss(&fp, &emb) - loss(&fm, &emb)) / (2.0 * h);
                    assert!((gf[(j, k, d)] - fd).abs() < 1e-6);
                }
            }
        }
        for i in 0..2 {
            for d in 0..3 {
                let mut ep = emb.clone();
                ep[(i, d)] += h;
                let mut em = emb.clone();
                em[(i, d)] -= h;
                let fd = (loss(&field, &ep) - loss(&field, &em)) / (2.0 * h);
                assert!((ge[(i, d)] - fd).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_costmap_renders_midgray() {
        let cv = CostVolume { values: Array3::from_elem((2, 2, 1), 0.37) };
        let img = costmap_to_gray(&cv, 0);
        assert!(img.iter().all(|&p| p == 128));
    }

    #[test]
    fn costmap_spans_full_range() {
        let mut values = Array3::zeros((1, 3, 1));
        values[(0, 0, 0)] = -0.5;
        values[(0, 1, 0)] = 0.0;
        values[(0, 2, 0)] = 0.5;
        let img = costmap_to_gray(&CostVolume { values }, 0);
        assert_eq!(img[(0, 0)], 0);
        assert_eq!(img[(0, 1)], 128);
        assert_eq!(img[(0, 2)], 255);
    }
}
