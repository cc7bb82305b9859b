//! Per-pixel attention across the class axis.
//!
//! At every pixel the M class tokens form a sequence; a pre-norm
//! transformer block mixes them with no positional encoding, so the
//! operation is equivariant to class order. The attention is either
//! full softmax or the kernelized linear variant.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::nn::linattn::LinAttnCache;
use crate::nn::norm::LnCache;
use crate::nn::{
    join, AttnCache, LayerNorm, Mlp, MlpCache, MultiHeadAttention, ParamVisitor, Visit,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionVariant {
    Full,
    Linear,
}

impl AttentionVariant {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Self::Full),
            "linear" => Some(Self::Linear),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Linear => "linear",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub variant: AttentionVariant,
}

enum AttnKindCache {
    Full(AttnCache),
    Linear(LinAttnCache),
}

pub struct ClassBlockCache {
    ln1: LnCache,
    attn: AttnKindCache,
    ln2: LnCache,
    mlp: MlpCache,
}

impl ClassBlock {
    pub fn new(
        rng: &mut ChaCha8Rng,
        c: usize,
        heads: usize,
        variant: AttentionVariant,
        mlp_ratio: usize,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(c),
            attn: MultiHeadAttention::new(rng, c, heads),
            ln2: LayerNorm::new(c),
            mlp: Mlp::new(rng, c, c * mlp_ratio),
            variant,
        }
    }

    /// `tokens` is `(M, C)`: the class stack at one pixel.
    pub fn forward(&self, tokens: &Array2<f64>) -> (Array2<f64>, ClassBlockCache) {
        let (xn, ln1) = self.ln1.forward(tokens);
        let (a, attn) = match self.variant {
            AttentionVariant::Full => {
                let (a, c) = self.attn.forward(&xn, None, None);
                (a, AttnKindCache::Full(c))
            }
            AttentionVariant::Linear => {
                let (a, c) = self.attn.forward_linear(&xn);
                (a, AttnKindCache::Linear(c))
            }
        };
        let y = tokens + &a;
        let (yn, ln2) = self.ln2.forward(&y);
        let (mo, mlp) = self.mlp.forward(&yn);
        let z = &y + &mo;
        (z, ClassBlockCache { ln1, attn, ln2, mlp })
    }

    pub fn backward(&mut self, cache: &ClassBlockCache, gz: &Array2<f64>) -> Array2<f64> {
        let gmo = self.mlp.backward(&cache.mlp, gz);
        let gy = gz + &self.ln2.backward(&cache.ln2, &gmo);
        let ga = match &cache.attn {
            AttnKindCache::Full(c) => self.attn.backward(c, &gy, false).0,
            AttnKindCache::Linear(c) => self.attn.backward_linear(c, &gy),
        };
        &gy + &self.ln1.backward(&cache.ln1, &ga)
    }

    pub fn zero_residual_branches(&mut self) {
        self.attn.wo.w.value.fill(0.0);
        self.attn.wo.b.value.fill(0.0);
        self.mlp.fc2.w.value.fill(0.0);
        self.mlp.fc2.b.value.fill(0.0);
    }
}

impl Visit for ClassBlock {
    fn visit(&mut self, path: &str, f: &mut ParamVisitor) {
        self.ln1.visit(&join(path, "ln1"), f);
        self.attn.visit(&join(path, "attn"), f);
        self.ln2.visit(&join(path, "ln2"), f);
        self.mlp.visit(&join(path, "mlp"), f);
    }
}
