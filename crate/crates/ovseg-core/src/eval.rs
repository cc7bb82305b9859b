//! Confusion-matrix accumulation and mIoU reporting, with and without
//! a designated background class.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::infer::{predict_full, SlidingWindowConfig};
use crate::model::Model;
use crate::train::load_dir_dataset;
use crate::upsample::SegmentationMask;
use crate::vocab::ClassVocabulary;

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
    pub ignored_pixels: u64,
}

impl ConfusionMatrix {
    pub fn new(m: usize) -> Self {
        Self { counts: Array2::zeros((m, m)), ignored_pixels: 0 }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    /// Tallies one image pair. Ground-truth ignore pixels are counted
    /// in `ignored_pixels` and otherwise skipped.
    pub fn accumulate(&mut self, gt: &SegmentationMask, pred: &SegmentationMask) -> Result<()> {
        if gt.labels.shape() != pred.labels.shape() {
            return Err(Error::Validation(format!(
                "mask shapes differ: {:?} vs {:?}",
                gt.labels.shape(),
                pred.labels.shape()
            )));
        }
        let m = self.num_classes();
        for (&g, &p) in gt.labels.iter().zip(pred.labels.iter()) {
            if g == gt.ignore_label {
                self.ignored_pixels += 1;
                continue;
            }
            if (g as usize) >= m {
                return Err(Error::Validation(format!(
                    "ground-truth label {g} out of range for {m} classes"
                )));
            }
            if (p as usize) >= m {
                return Err(Error::Validation(format!(
                    "predicted label {p} out of range for {m} classes"
                )));
            }
            self.counts[(g as usize, p as usize)] += 1;
        }
        Ok(())
    }

    /// Integer merge; accumulation is associative and commutative.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.counts += &other.counts;
        self.ignored_pixels += other.ignored_pixels;
    }

    /// Copy with class `idx` removed from both axes.
    pub fn without_class(&self, idx: usize) -> ConfusionMatrix {
        let m = self.num_classes();
        debug_assert!(idx < m);
        let keep: Vec<usize> = (0..m).filter(|&i| i != idx).collect();
        let mut counts = Array2::zeros((m - 1, m - 1));
        for (ni, &oi) in keep.iter().enumerate() {
            for (nj, &oj) in keep.iter().enumerate() {
                counts[(ni, nj)] = self.counts[(oi, oj)];
            }
        }
        ConfusionMatrix { counts, ignored_pixels: self.ignored_pixels }
    }

    /// IoU per class; `None` where the class appears in neither ground
    /// truth nor prediction (undefined).
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let m = self.num_classes();
        (0..m)
            .map(|c| {
                let tp = self.counts[(c, c)];
                let row: u64 = self.counts.row(c).sum();
                let col: u64 = self.counts.column(c).sum();
                let denom = row + col - tp;
                if denom == 0 {
                    None
                } else {
                    Some(tp as f64 / denom as f64)
                }
            })
            .collect()
    }

    /// Mean over defined per-class IoUs.
    pub fn miou(&self) -> Result<f64> {
        let defined: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if defined.is_empty() {
            return Err(Error::UndefinedMetric(
                "every class is absent from both ground truth and prediction".into(),
            ));
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackgroundMode {
    WithBackground,
    /// Drops the class at this index from both matrix axes.
    WithoutBackground { index: usize },
}

impl BackgroundMode {
    pub fn name(&self) -> &'static str {
        match self {
            Self::WithBackground => "with_background",
            Self::WithoutBackground { .. } => "without_background",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub mode: BackgroundMode,
    pub class_names: Vec<String>,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub images_evaluated: usize,
    pub images_skipped: Vec<String>,
    pub ignored_pixels: u64,
}

/// Finalizes a report from an accumulated matrix.
pub fn metrics_report(
    cm: &ConfusionMatrix,
    names: &[String],
    mode: BackgroundMode,
    images_evaluated: usize,
    images_skipped: Vec<String>,
) -> Result<MetricsReport> {
    if names.len() != cm.num_classes() {
        return Err(Error::Validation(format!(
            "{} names for a {}-class matrix",
            names.len(),
            cm.num_classes()
        )));
    }
    let (cm, class_names) = match mode {
        BackgroundMode::WithBackground => (cm.clone(), names.to_vec()),
        BackgroundMode::WithoutBackground { index } => {
            if index >= cm.num_classes() {
                return Err(Error::Validation(format!(
                    "background index {index} out of range"
                )));
            }
            let kept: Vec<String> = names
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != index)
                .map(|(_, n)| n.clone())
                .collect();
            (cm.without_class(index), kept)
        }
    };
    let per_class_iou = cm.per_class_iou();
    let miou = cm.miou()?;
    Ok(MetricsReport {
        mode,
        class_names,
        per_class_iou,
        miou,
        images_evaluated,
        images_skipped,
        ignored_pixels: cm.ignored_pixels,
    })
}

/// How predictions are produced during directory evaluation.
pub enum Predictor<'a> {
    Model {
        model: &'a Model,
        embeddings: ndarray::Array2<f64>,
        window: SlidingWindowConfig,
    },
    /// Echoes the ground truth; pins the miou=1.0 upper bound.
    Oracle,
}

/// Predicts every image/mask pair under `dir` once and accumulates the
/// confusion matrix, skipping images with missing masks. Returns the
/// matrix, the evaluated count, and the skipped image names so callers
/// can finalize reports for any number of background modes.
pub fn accumulate_directory(
    dir: &Path,
    vocab: &ClassVocabulary,
    predictor: &Predictor,
) -> Result<(ConfusionMatrix, usize, Vec<String>)> {
    let ds = load_dir_dataset(dir)?;
    let mut cm = ConfusionMatrix::new(vocab.len());
    for sample in &ds.samples {
        let pred = match predictor {
            Predictor::Model { model, embeddings, window } => {
                predict_full(model, &sample.image, embeddings, window)?
            }
            Predictor::Oracle => sample.mask.clone(),
        };
        cm.accumulate(&sample.mask, &pred)?;
    }
    Ok((cm, ds.samples.len(), ds.skipped))
}

/// Evaluates every image/mask pair under `dir`, skipping images with
/// missing masks (recorded in the report).
pub fn evaluate_directory(
    dir: &Path,
    vocab: &ClassVocabulary,
    predictor: &Predictor,
    mode: BackgroundMode,
) -> Result<MetricsReport> {
    let (cm, evaluated, skipped) = accumulate_directory(dir, vocab, predictor)?;
    metrics_report(&cm, vocab.names(), mode, evaluated, skipped)
}

fn fmt_iou(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.1}", x * 100.0),
        None => "undefined".into(),
    }
}

/// Human-readable table, percentages with one decimal.
pub fn write_text_report(report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("mode: {}\n", report.mode.name()));
    out.push_str(&format!(
        "images: {} evaluated, {} skipped\n",
        report.images_evaluated,
        report.images_skipped.len()
    ));
    let width = report.class_names.iter().map(|n| n.len()).max().unwrap_or(5).max(5);
    out.push_str(&format!("{:width$}  IoU%\n", "class"));
    for (name, iou) in report.class_names.iter().zip(&report.per_class_iou) {
        out.push_str(&format!("{name:width$}  {}\n", fmt_iou(*iou)));
    }
    out.push_str(&format!("{:width$}  {:.1}\n", "mIoU", report.miou * 100.0));
    out
}

/// Machine-readable `name=value` lines.
pub fn write_kv_report(report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("mode={}\n", report.mode.name()));
    for (name, iou) in report.class_names.iter().zip(&report.per_class_iou) {
        out.push_str(&format!("{name}={}\n", fmt_iou(*iou)));
    }
    out.push_str(&format!("miou={:.1}\n", report.miou * 100.0));
    out
}
