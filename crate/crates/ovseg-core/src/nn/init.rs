//! Seeded weight initialization.
//!
//! Everything is driven by `ChaCha8Rng` so that two models built from the
//! same seed are bit-identical, on any platform.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive an independent RNG stream for a named component.
///
/// Mixes the component name into the master seed with FNV-1a so adding a
/// component never shifts the streams of existing ones.
pub fn component_rng(master_seed: u64, component: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(master_seed ^ fnv1a(component.as_bytes()))
}

/// FNV-1a hash, used for RNG stream derivation and token hashing.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn uniform(rng: &mut ChaCha8Rng, limit: f64) -> f64 {
    rng.random_range(-limit..limit)
}

/// Xavier-uniform matrix, shape `[fan_in, fan_out]`.
pub fn xavier2(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| uniform(rng, limit))
}

/// Xavier-uniform conv kernel, shape `[kh, kw, cin, cout]`.
pub fn xavier4(rng: &mut ChaCha8Rng, kh: usize, kw: usize, cin: usize, cout: usize) -> Array4<f64> {
    let fan_in = kh * kw * cin;
    let fan_out = kh * kw * cout;
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array4::from_shape_fn((kh, kw, cin, cout), |_| uniform(rng, limit))
}

pub fn zeros1(n: usize) -> Array1<f64> {
    Array1::zeros(n)
}

/// Identity matrix with small uniform noise, for layers that stand in for
/// near-pretrained blocks.
pub fn identity_noise(rng: &mut ChaCha8Rng, n: usize, eps: f64) -> Array2<f64> {
    let mut m = Array2::eye(n);
    for v in m.iter_mut() {
        *v += uniform(rng, eps);
    }
    m
}
