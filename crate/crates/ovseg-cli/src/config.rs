//! Run configuration: a flat `key = value` file with `[section]`
//! headers layered over desk-scale defaults, then over by command-line
//! flags. Parse errors carry `path:line:` prefixes. Unknown sections
//! and keys are rejected so typos cannot silently fall back to
//! defaults.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ovseg_core::agg::AttentionVariant;
use ovseg_core::infer::SlidingWindowConfig;
use ovseg_core::model::ModelConfig;
use ovseg_core::train::TrainConfig;
use ovseg_core::upsample::ReduceOrder;
use ovseg_core::{Error, Result};

/// Where training samples come from and which text assets to load.
#[derive(Debug, Clone)]
pub struct DataConfig {
    /// Directory holding `images/` and `masks/` subdirectories.
    pub dataset_dir: Option<PathBuf>,
    /// Class-name file, one per line. Defaults to the synthetic names
    /// when training on the synthetic set.
    pub vocabulary: Option<PathBuf>,
    /// Prompt-template file. Defaults to the shipped template set.
    pub templates: Option<PathBuf>,
    /// Generate the synthetic training set instead of reading files.
    pub synthetic: bool,
    pub synthetic_images: usize,
    pub synthetic_resolution: usize,
    pub synthetic_snap: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset_dir: None,
            vocabulary: None,
            templates: None,
            synthetic: false,
            synthetic_images: 16,
            synthetic_resolution: 64,
            synthetic_snap: 8,
        }
    }
}

/// Union of every sub-configuration one run needs.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub window: SlidingWindowConfig,
    /// Extra checkpoints every N steps; 0 writes only at completion.
    pub checkpoint_every: usize,
    pub data: DataConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            window: SlidingWindowConfig::default(),
            checkpoint_every: 0,
            data: DataConfig::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with `path`, if given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("{}: {e}", path.display()))
            })?;
            cfg.apply_text(&text, &path.display().to_string())?;
        }
        Ok(cfg)
    }

    fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let at = |msg: String| Error::Config(format!("{origin}:{}: {msg}", i + 1));
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| at(format!("unterminated section header `{line}`")))?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            let value = value.trim();
            self.apply(&section, key, value).map_err(|e| match e {
                Error::Config(msg) => at(msg),
                other => other,
            })?;
        }
        Ok(())
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        match section {
            "model" => match key {
                "master_seed" => self.model.master_seed = parse(key, value)?,
                "patch_size" => self.model.patch_size = parse(key, value)?,
                "vision_dim" => self.model.vision_dim = parse(key, value)?,
                "text_table_size" => self.model.text_table_size = parse(key, value)?,
                "sigma_color" => self.model.sigma_color = parse(key, value)?,
                "sigma_spatial" => {
                    self.model.sigma_spatial =
                        if value == "none" { None } else { Some(parse(key, value)?) }
                }
                "reduce_order" => {
                    self.model.reduce_order = ReduceOrder::parse(value).ok_or_else(|| {
                        unknown_value(key, value, "reduce_after_up | reduce_before_up")
                    })?
                }
                _ => return Err(unknown_key(section, key)),
            },
            "aggregator" => match key {
                "d_agg" => self.model.agg.d_agg = parse(key, value)?,
                "num_blocks" => self.model.agg.num_blocks = parse(key, value)?,
                "window_size" => self.model.agg.window_size = parse(key, value)?,
                "num_heads" => self.model.agg.num_heads = parse(key, value)?,
                "attention_variant" => {
                    self.model.agg.attention_variant = AttentionVariant::parse(value)
                        .ok_or_else(|| unknown_value(key, value, "full | linear"))?
                }
                "shift_second" => self.model.agg.shift_second = parse(key, value)?,
                "mlp_ratio" => self.model.agg.mlp_ratio = parse(key, value)?,
                _ => return Err(unknown_key(section, key)),
            },
            "train" => match key {
                "batch_size" => self.train.batch_size = parse(key, value)?,
                "iterations" => self.train.iterations = parse(key, value)?,
                "train_resolution" => self.train.train_resolution = parse(key, value)?,
                "lr_main" => self.train.lr_main = parse(key, value)?,
                "lr_backbone" => self.train.lr_backbone = parse(key, value)?,
                "log_every" => self.train.log_every = parse(key, value)?,
                "seed" => self.train.seed = parse(key, value)?,
                "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
                _ => return Err(unknown_key(section, key)),
            },
            "freeze" => match key {
                "vision_last_two" => {
                    self.train.freeze.last_two_vision_blocks_trainable = parse(key, value)?
                }
                "text_encoder" => {
                    self.train.freeze.text_encoder_trainable = parse(key, value)?
                }
                _ => return Err(unknown_key(section, key)),
            },
            "window" => match key {
                "eval_resolution" => self.window.eval_resolution = parse(key, value)?,
                "window" => self.window.window = parse(key, value)?,
                "stride" => self.window.stride = parse(key, value)?,
                _ => return Err(unknown_key(section, key)),
            },
            "data" => match key {
                "dataset_dir" => self.data.dataset_dir = Some(PathBuf::from(value)),
                "vocabulary" => self.data.vocabulary = Some(PathBuf::from(value)),
                "templates" => self.data.templates = Some(PathBuf::from(value)),
                "synthetic" => self.data.synthetic = parse(key, value)?,
                "synthetic_images" => self.data.synthetic_images = parse(key, value)?,
                "synthetic_resolution" => {
                    self.data.synthetic_resolution = parse(key, value)?
                }
                "synthetic_snap" => self.data.synthetic_snap = parse(key, value)?,
                _ => return Err(unknown_key(section, key)),
            },
            "output" => match key {
                "dir" => self.out_dir = PathBuf::from(value),
                _ => return Err(unknown_key(section, key)),
            },
            "" => {
                return Err(Error::Config(format!(
                    "key `{key}` appears before any [section] header"
                )))
            }
            _ => return Err(Error::Config(format!("unknown section `[{section}]`"))),
        }
        Ok(())
    }

    /// Structural validation shared by every command. File existence is
    /// checked here too, so commands see a fully valid config before
    /// producing any output.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(self.model.patch_size)?;
        self.window.validate()?;
        if self.window.window % self.model.patch_size != 0 {
            return Err(Error::Config(format!(
                "window {} not divisible by patch size {}",
                self.window.window, self.model.patch_size
            )));
        }
        if self.data.synthetic && self.data.synthetic_snap == 0 {
            return Err(Error::Config("synthetic_snap must be >= 1".into()));
        }
        for (label, path) in [
            ("vocabulary", &self.data.vocabulary),
            ("templates", &self.data.templates),
        ] {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(Error::Config(format!(
                        "{label} file does not exist: {}",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

fn parse<T>(key: &str, value: &str) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("invalid value `{value}` for `{key}`: {e}")))
}

fn unknown_key(section: &str, key: &str) -> Error {
    Error::Config(format!("unknown key `{key}` in section `[{section}]`"))
}

fn unknown_value(key: &str, value: &str, expected: &str) -> Error {
    Error::Config(format!("invalid value `{value}` for `{key}`: expected {expected}"))
}
