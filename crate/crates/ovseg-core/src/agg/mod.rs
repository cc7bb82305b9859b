//! Cost-aggregation network: class-wise projection to `D_agg` channels
//! followed by repeated (windowed spatial attention pair, per-pixel
//! class attention) blocks.
//!
//! Every stage is class-count agnostic: the projection shares one
//! convolutional net across class slices, spatial blocks never mix
//! classes, and class attention carries no positional encoding. The
//! whole stack is therefore equivariant to class permutations, and its
//! activation footprint grows linearly in M.

pub mod classattn;
pub mod swin;

use ndarray::{s, Array3, Array4};

pub use classattn::{AttentionVariant, ClassBlock};
pub use swin::SwinBlock;

use crate::cost::CostVolume;
use crate::error::{Error, Result};
use crate::nn::act::{gelu, gelu_deriv};
use crate::nn::{component_rng, join, Conv2d, ParamVisitor, Visit};
use classattn::ClassBlockCache;
use swin::SwinCache;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregatorConfig {
    pub d_agg: usize,
    pub num_blocks: usize,
    pub window_size: usize,
    pub num_heads: usize,
    pub attention_variant: AttentionVariant,
    pub shift_second: bool,
    /// Hidden width multiplier of the block MLPs.
    pub mlp_ratio: usize,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            d_agg: 128,
            num_blocks: 6,
            window_size: 7,
            num_heads: 4,
            attention_variant: AttentionVariant::Full,
            shift_second: true,
            mlp_ratio: 4,
        }
    }
}

impl AggregatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks < 1 {
            return Err(Error::Config("num_blocks must be >= 1".into()));
        }
        if self.d_agg < 1 {
            return Err(Error::Config("d_agg must be >= 1".into()));
        }
        if self.num_heads < 1 || self.d_agg % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_agg {} must be divisible by num_heads {}",
                self.d_agg, self.num_heads
            )));
        }
        if self.window_size < 1 {
            return Err(Error::Config("window_size must be >= 1".into()));
        }
        if self.mlp_ratio < 1 {
            return Err(Error::Config("mlp_ratio must be >= 1".into()));
        }
        Ok(())
    }
}

/// `(h, w, M, D_agg)` refined cost features.
#[derive(Debug, Clone)]
pub struct ProjectedCostVolume {
    pub values: Array4<f64>,
}

impl ProjectedCostVolume {
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[2], s[3])
    }

    /// Stored activation elements; exactly `h * w * M * D_agg`.
    pub fn element_count(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone)]
struct AggBlock {
    swin1: SwinBlock,
    swin2: SwinBlock,
    class_attn: ClassBlock,
}

#[derive(Debug, Clone)]
pub struct Aggregator {
    pub cfg: AggregatorConfig,
    conv1: Conv2d,
    conv2: Conv2d,
    blocks: Vec<AggBlock>,
}

struct ProjCache {
    x: Array3<f64>,
    pre: Array3<f64>,
    mid: Array3<f64>,
}

struct BlockCache {
    swin1: Vec<SwinCache>,
    swin2: Vec<SwinCache>,
    class_attn: Vec<ClassBlockCache>,
}

pub struct AggCache {
    proj: Vec<ProjCache>,
    blocks: Vec<BlockCache>,
    h: usize,
    w: usize,
    m: usize,
}

impl Aggregator {
    pub fn new(master_seed: u64, cfg: AggregatorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = component_rng(master_seed, "aggregator");
        let conv1 = Conv2d::new(&mut rng, 3, 1, cfg.d_agg);
        let conv2 = Conv2d::new(&mut rng, 3, cfg.d_agg, cfg.d_agg);
        let blocks = (0..cfg.num_blocks)
            .map(|_| AggBlock {
                swin1: SwinBlock::new(
                    &mut rng,
                    cfg.d_agg,
                    cfg.num_heads,
                    cfg.window_size,
                    false,
                    cfg.mlp_ratio,
                ),
                swin2: SwinBlock::new(
                    &mut rng,
                    cfg.d_agg,
                    cfg.num_heads,
                    cfg.window_size,
                    cfg.shift_second,
                    cfg.mlp_ratio,
                ),
                class_attn: ClassBlock::new(
                    &mut rng,
                    cfg.d_agg,
                    cfg.num_heads,
                    cfg.attention_variant,
                    cfg.mlp_ratio,
                ),
            })
            .collect();
        Ok(Self { cfg, conv1, conv2, blocks })
    }

    /// Projects each class slice through the shared conv net.
    pub fn project_classwise(&self, v: &CostVolume) -> ProjectedCostVolume {
        let (vol, _) = self.project_with_cache(v);
        vol
    }

    fn project_with_cache(&self, v: &CostVolume) -> (ProjectedCostVolume, Vec<ProjCache>) {
        let (h, w, m) = v.shape();
        let d = self.cfg.d_agg;
        let mut values = Array4::zeros((h, w, m, d));
        let mut caches = Vec::with_capacity(m);
        for i in 0..m {
            let x = v.values.slice(s![.., .., i..i + 1]).to_owned();
            let pre = self.conv1.forward(&x);
            let mid = pre.mapv(gelu);
            let out = self.conv2.forward(&mid);
            values.slice_mut(s![.., .., i, ..]).assign(&out);
            caches.push(ProjCache { x, pre, mid });
        }
        (ProjectedCostVolume { values }, caches)
    }

    /// One spatial aggregation pass (both Swin blocks of pair `b`),
    /// applied per class.
    pub fn spatial_aggregate_block(&self, b: usize, v: &ProjectedCostVolume) -> ProjectedCostVolume {
        let (h, w, m, d) = v.shape();
        let mut values = Array4::zeros((h, w, m, d));
        for i in 0..m {
            let slice = v.values.slice(s![.., .., i, ..]).to_owned();
            let (s1, _) = self.blocks[b].swin1.forward(&slice);
            let (s2, _) = self.blocks[b].swin2.forward(&s1);
            values.slice_mut(s![.., .., i, ..]).assign(&s2);
        }
        ProjectedCostVolume { values }
    }

    /// One class-attention pass of pair `b`, applied per pixel.
    pub fn class_attend_block(&self, b: usize, v: &ProjectedCostVolume) -> ProjectedCostVolume {
        let (h, w, m, d) = v.shape();
        let mut values = Array4::zeros((h, w, m, d));
        for j in 0..h {
            for k in 0..w {
                let tokens = v.values.slice(s![j, k, .., ..]).to_owned();
                let (z, _) = self.blocks[b].class_attn.forward(&tokens);
                values.slice_mut(s![j, k, .., ..]).assign(&z);
            }
        }
        ProjectedCostVolume { values }
    }

    /// Full inference pass without caches.
    pub fn aggregate(&self, v: &CostVolume) -> ProjectedCostVolume {
        let mut vol = self.project_classwise(v);
        for b in 0..self.blocks.len() {
            vol = self.spatial_aggregate_block(b, &vol);
            vol = self.class_attend_block(b, &vol);
        }
        vol
    }

    /// Training pass; the cache feeds [`Self::backward`].
    pub fn forward(&self, v: &CostVolume) -> (ProjectedCostVolume, AggCache) {
        let (h, w, m) = v.shape();
        let d = self.cfg.d_agg;
        let (mut vol, proj) = self.project_with_cache(v);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let mut swin1 = Vec::with_capacity(m);
            let mut swin2 = Vec::with_capacity(m);
            for i in 0..m {
                let slice = vol.values.slice(s![.., .., i, ..]).to_owned();
                let (s1, c1) = blk.swin1.forward(&slice);
                let (s2, c2) = blk.swin2.forward(&s1);
                vol.values.slice_mut(s![.., .., i, ..]).assign(&s2);
                swin1.push(c1);
                swin2.push(c2);
            }
            let mut class_attn = Vec::with_capacity(h * w);
            for j in 0..h {
                for k in 0..w {
                    let tokens = vol.values.slice(s![j, k, .., ..]).to_owned();
                    let (z, cc) = blk.class_attn.forward(&tokens);
                    vol.values.slice_mut(s![j, k, .., ..]).assign(&z);
                    class_attn.push(cc);
                }
            }
            blocks.push(BlockCache { swin1, swin2, class_attn });
        }
        let _ = d;
        (vol, AggCache { proj, blocks, h, w, m })
    }

    /// Returns the gradient with respect to the raw cost volume.
    pub fn backward(&mut self, cache: &AggCache, gvol: &Array4<f64>) -> Array3<f64> {
        let (h, w, m) = (cache.h, cache.w, cache.m);
        let mut g = gvol.clone();

        for (bi, blk) in self.blocks.iter_mut().enumerate().rev() {
            let bc = &cache.blocks[bi];
            for j in 0..h {
                for k in 0..w {
                    let gz = g.slice(s![j, k, .., ..]).to_owned();
                    let gx = blk.class_attn.backward(&bc.class_attn[j * w + k], &gz);
                    g.slice_mut(s![j, k, .., ..]).assign(&gx);
                }
            }
            for i in 0..m {
                let gs2 = g.slice(s![.., .., i, ..]).to_owned();
                let gs1 = blk.swin2.backward(&bc.swin2[i], &gs2);
                let gx = blk.swin1.backward(&bc.swin1[i], &gs1);
                g.slice_mut(s![.., .., i, ..]).assign(&gx);
            }
        }

        let mut gcost = Array3::zeros((h, w, m));
        for i in 0..m {
            let pc = &cache.proj[i];
            let gout = g.slice(s![.., .., i, ..]).to_owned();
            let gmid = self.conv2.backward(&pc.mid, &gout);
            let mut gpre = gmid;
            ndarray::Zip::from(&mut gpre).and(&pc.pre).for_each(|g, &p| *g *= gelu_deriv(p));
            let gx = self.conv1.backward(&pc.x, &gpre);
            gcost.slice_mut(s![.., .., i]).assign(&gx.slice(s![.., .., 0]));
        }
        gcost
    }

    /// Turns every block into an exact identity (zeroed branch
    /// projections); the conv projection is untouched.
    pub fn zero_residual_branches(&mut self) {
        for blk in &mut self.blocks {
            blk.swin1.zero_residual_branches();
            blk.swin2.zero_residual_branches();
            blk.class_attn.zero_residual_branches();
        }
    }
}

impl Visit for Aggregator {
    fn visit(&mut self, path: &str, f: &mut ParamVisitor) {
        self.conv1.visit(&join(path, "proj.conv1"), f);
        self.conv2.visit(&join(path, "proj.conv2"), f);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            let base = join(path, &format!("block{i}"));
            blk.swin1.visit(&join(&base, "swin1"), f);
            blk.swin2.visit(&join(&base, "swin2"), f);
            blk.class_attn.visit(&join(&base, "class"), f);
        }
    }
}
