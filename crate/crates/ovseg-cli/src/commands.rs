//! Command implementations. Each validates its full configuration,
//! then produces artifacts under the output directory; nothing is
//! written when validation fails.

use std::fs;
use std::path::{Path, PathBuf};

use ovseg_core::checkpoint::{load_model, save_model};
use ovseg_core::cost::{costmap_to_gray, CostVolume};
use ovseg_core::eval::{
    accumulate_directory, metrics_report, write_kv_report, write_text_report, BackgroundMode,
    Predictor,
};
use ovseg_core::imageio::{
    bilinear_resize, load_image, save_gray, save_mask, save_mask_colored, write_palette,
};
use ovseg_core::infer::{predict_full, SlidingWindowConfig};
use ovseg_core::model::Model;
use ovseg_core::train::{
    load_dir_dataset, sample_random_subset, synthetic_class_names, synthetic_dataset,
    SyntheticConfig, Trainer, TrainingSample,
};
use ovseg_core::upsample::argmax_mask;
use ovseg_core::vocab::{ClassVocabulary, PromptTemplateSet};
use ovseg_core::{Error, Result};

use crate::config::RunConfig;

fn ensure_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn load_vocabulary(cfg: &RunConfig, required_for: &str) -> Result<ClassVocabulary> {
    match &cfg.data.vocabulary {
        Some(path) => ClassVocabulary::from_file(path),
        None if cfg.data.synthetic => ClassVocabulary::new(synthetic_class_names()),
        None => Err(Error::Config(format!(
            "{required_for} needs a vocabulary: pass --vocab or set [data] vocabulary"
        ))),
    }
}

fn load_templates(cfg: &RunConfig) -> Result<PromptTemplateSet> {
    match &cfg.data.templates {
        Some(path) => PromptTemplateSet::from_file(path),
        None => Ok(PromptTemplateSet::default_set()),
    }
}

fn load_training_data(cfg: &RunConfig) -> Result<Vec<TrainingSample>> {
    if cfg.data.synthetic {
        return Ok(synthetic_dataset(
            cfg.train.seed,
            &SyntheticConfig {
                resolution: cfg.data.synthetic_resolution,
                num_images: cfg.data.synthetic_images,
                snap: cfg.data.synthetic_snap,
            },
        ));
    }
    let dir = cfg.data.dataset_dir.as_ref().ok_or_else(|| {
        Error::Config("no dataset: pass --dataset or set [data] dataset_dir".into())
    })?;
    if !dir.is_dir() {
        return Err(Error::Config(format!(
            "dataset directory does not exist: {}",
            dir.display()
        )));
    }
    let ds = load_dir_dataset(dir)?;
    for name in &ds.skipped {
        eprintln!("warning: skipping {name}: no mask found");
    }
    Ok(ds.samples)
}

/// Trains a fresh model and writes `checkpoint.ovsg`, `train_log.txt`,
/// and optional interval checkpoints.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let vocab = load_vocabulary(cfg, "train")?;
    let templates = load_templates(cfg)?;
    let data = load_training_data(cfg)?;

    ensure_out_dir(&cfg.out_dir)?;
    let model = Model::new(cfg.model.clone())?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), vocab, templates)?;
    let mut log = fs::File::create(cfg.out_dir.join("train_log.txt"))?;
    let every = cfg.checkpoint_every;
    let out_dir = cfg.out_dir.clone();
    let losses = trainer.run_with(&data, &mut log, |step, model| {
        if every > 0 && (step + 1) % every == 0 {
            save_model(model, &out_dir.join(format!("checkpoint_{:06}.ovsg", step + 1)))?;
        }
        Ok(())
    })?;
    let final_path = cfg.out_dir.join("checkpoint.ovsg");
    save_model(&mut trainer.model, &final_path)?;
    println!(
        "trained {} iterations, final loss {:.6}",
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    println!("checkpoint: {}", final_path.display());
    Ok(())
}

/// Segments each input image and writes `<stem>_mask.png`, plus a
/// color render and palette when requested.
pub fn cmd_predict(
    cfg: &RunConfig,
    checkpoint: &Path,
    images: &[PathBuf],
    palette: bool,
) -> Result<()> {
    cfg.validate()?;
    let vocab = load_vocabulary(cfg, "predict")?;
    let templates = load_templates(cfg)?;
    for path in images {
        if !path.is_file() {
            return Err(Error::Config(format!(
                "input image does not exist: {}",
                path.display()
            )));
        }
    }
    let model = load_model(checkpoint)?;
    check_window(&cfg.window, &model)?;
    let embeddings = model.embed_classes(&vocab, &templates)?;

    ensure_out_dir(&cfg.out_dir)?;
    if palette {
        write_palette(&cfg.out_dir.join("palette.tsv"), vocab.names())?;
    }
    for path in images {
        let image = load_image(path)?;
        let mask = predict_full(&model, &image, &embeddings, &cfg.window)?;
        let stem = file_stem(path);
        save_mask(&cfg.out_dir.join(format!("{stem}_mask.png")), &mask.labels)?;
        if palette {
            save_mask_colored(
                &cfg.out_dir.join(format!("{stem}_color.png")),
                &mask,
                vocab.len(),
            )?;
        }
        println!("{} -> {stem}_mask.png", path.display());
    }
    Ok(())
}

/// Evaluates a checkpoint (or the ground-truth oracle) over a dataset
/// directory, emitting one report per requested background mode from a
/// single prediction pass.
#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    dataset: &Path,
    with_background: bool,
    without_background: bool,
    background_index: usize,
    oracle: bool,
) -> Result<()> {
    cfg.validate()?;
    let vocab = load_vocabulary(cfg, "eval")?;
    let templates = load_templates(cfg)?;
    if !dataset.is_dir() {
        return Err(Error::Config(format!(
            "dataset directory does not exist: {}",
            dataset.display()
        )));
    }
    let mut modes = Vec::new();
    if with_background || !without_background {
        modes.push(BackgroundMode::WithBackground);
    }
    if without_background {
        modes.push(BackgroundMode::WithoutBackground { index: background_index });
    }

    let loaded;
    let predictor = if oracle {
        Predictor::Oracle
    } else {
        let path = checkpoint.ok_or_else(|| {
            Error::Config("eval needs --checkpoint (or --oracle-model)".into())
        })?;
        loaded = load_model(path)?;
        check_window(&cfg.window, &loaded)?;
        let embeddings = loaded.embed_classes(&vocab, &templates)?;
        Predictor::Model { model: &loaded, embeddings, window: cfg.window }
    };

    let (cm, evaluated, skipped) = accumulate_directory(dataset, &vocab, &predictor)?;
    ensure_out_dir(&cfg.out_dir)?;
    for mode in modes {
        let report = metrics_report(&cm, vocab.names(), mode, evaluated, skipped.clone())?;
        let text = write_text_report(&report);
        print!("{text}");
        fs::write(cfg.out_dir.join(format!("report_{}.txt", mode.name())), text)?;
        fs::write(
            cfg.out_dir.join(format!("report_{}.kv", mode.name())),
            write_kv_report(&report),
        )?;
    }
    Ok(())
}

/// Which tensor `export-costmaps` renders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Stage {
    /// Cosine cost volume at patch resolution, before aggregation.
    Raw,
    /// Aggregated and reduced per-class scores at image resolution.
    Aggregated,
}

/// Writes one min-max normalized grayscale image per class, named
/// `costmap_<i>.png`, plus the `segmentation.png` argmax render.
pub fn cmd_export_costmaps(
    cfg: &RunConfig,
    checkpoint: &Path,
    image_path: &Path,
    stage: Stage,
) -> Result<()> {
    cfg.validate()?;
    let vocab = load_vocabulary(cfg, "export-costmaps")?;
    let templates = load_templates(cfg)?;
    if !image_path.is_file() {
        return Err(Error::Config(format!(
            "input image does not exist: {}",
            image_path.display()
        )));
    }
    let model = load_model(checkpoint)?;
    check_window(&cfg.window, &model)?;
    let embeddings = model.embed_classes(&vocab, &templates)?;

    let image = load_image(image_path)?;
    let side = cfg.window.eval_resolution;
    let resized = bilinear_resize(&image, side, side);
    let volume = match stage {
        Stage::Raw => model.cost_volume(&resized, &embeddings)?,
        Stage::Aggregated => {
            CostVolume { values: model.score_maps(&resized, &embeddings)?.values }
        }
    };

    ensure_out_dir(&cfg.out_dir)?;
    for i in 0..vocab.len() {
        let gray = costmap_to_gray(&volume, i);
        save_gray(&cfg.out_dir.join(format!("costmap_{i}.png")), &gray)?;
    }
    let scores = model.score_maps(&resized, &embeddings)?;
    let mask = argmax_mask(&scores);
    save_mask_colored(&cfg.out_dir.join("segmentation.png"), &mask, vocab.len())?;
    println!("exported {} cost maps to {}", vocab.len(), cfg.out_dir.display());
    Ok(())
}

/// Subset selection mode for `prepare-subset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SubsetMode {
    /// The shipped 41-class list.
    Curated,
    /// A seeded random sample from a raw class list.
    Random,
}

/// Writes `vocabulary.txt` under the output directory.
pub fn cmd_prepare_subset(
    cfg: &RunConfig,
    mode: SubsetMode,
    raw_list: Option<&Path>,
    size: Option<usize>,
    seed: u64,
) -> Result<()> {
    cfg.validate()?;
    let vocab = match mode {
        SubsetMode::Curated => ClassVocabulary::coco_rs_subset(),
        SubsetMode::Random => {
            let raw = raw_list.ok_or_else(|| {
                Error::Config("random mode needs --raw-list <file>".into())
            })?;
            let size = size.ok_or_else(|| {
                Error::Config("random mode needs --size <n>".into())
            })?;
            sample_random_subset(&ClassVocabulary::from_file(raw)?, size, seed)?
        }
    };
    ensure_out_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("vocabulary.txt");
    vocab.write_file(&path)?;
    println!("{} classes -> {}", vocab.len(), path.display());
    Ok(())
}

fn check_window(window: &SlidingWindowConfig, model: &Model) -> Result<()> {
    if window.window % model.cfg.patch_size != 0 {
        return Err(Error::Config(format!(
            "window {} not divisible by checkpoint patch size {}",
            window.window, model.cfg.patch_size
        )));
    }
    if window.eval_resolution % model.cfg.patch_size != 0 {
        return Err(Error::Config(format!(
            "eval resolution {} not divisible by checkpoint patch size {}",
            window.eval_resolution, model.cfg.patch_size
        )));
    }
    Ok(())
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}
