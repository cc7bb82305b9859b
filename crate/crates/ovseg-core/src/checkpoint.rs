//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "OVSG"
//! version u32      currently 1
//! config  u32 count, then per entry:
//!         u16 key length, key bytes (UTF-8),
//!         u16 value length, value bytes (UTF-8)
//! tensors u32 count, then per tensor:
//!         u16 name length, name bytes (UTF-8),
//!         u8 rank, rank * u32 dims,
//!         product(dims) * f32 values
//! ```
//!
//! Values are stored as 32-bit floats; loading widens back to `f64`.
//! Any structural mismatch surfaces as [`Error::Checkpoint`].

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayD;

use crate::agg::{AggregatorConfig, AttentionVariant};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::Visit;
use crate::upsample::ReduceOrder;

pub const MAGIC: [u8; 4] = *b"OVSG";
pub const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| bad(format!("truncated while reading {what}")))
}

fn read_u16(r: &mut impl Read, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(r: &mut impl Read, what: &str) -> Result<String> {
    let len = read_u16(r, what)? as usize;
    let mut b = vec![0u8; len];
    read_exact(r, &mut b, what)?;
    String::from_utf8(b).map_err(|_| bad(format!("{what} is not valid UTF-8")))
}

fn write_string(w: &mut impl Write, s: &str) -> Result<()> {
    let bytes = s.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(bad(format!("string too long for checkpoint: {} bytes", bytes.len())));
    }
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn config_to_kv(cfg: &ModelConfig) -> Vec<(String, String)> {
    let mut kv = vec![
        ("master_seed".into(), cfg.master_seed.to_string()),
        ("patch_size".into(), cfg.patch_size.to_string()),
        ("vision_dim".into(), cfg.vision_dim.to_string()),
        ("text_table_size".into(), cfg.text_table_size.to_string()),
        ("d_agg".into(), cfg.agg.d_agg.to_string()),
        ("num_blocks".into(), cfg.agg.num_blocks.to_string()),
        ("window_size".into(), cfg.agg.window_size.to_string()),
        ("num_heads".into(), cfg.agg.num_heads.to_string()),
        ("attention_variant".into(), cfg.agg.attention_variant.name().into()),
        ("shift_second".into(), cfg.agg.shift_second.to_string()),
        ("mlp_ratio".into(), cfg.agg.mlp_ratio.to_string()),
        ("sigma_color".into(), cfg.sigma_color.to_string()),
        ("reduce_order".into(), cfg.reduce_order.name().into()),
    ];
    if let Some(ss) = cfg.sigma_spatial {
        kv.push(("sigma_spatial".into(), ss.to_string()));
    }
    kv
}

fn kv_get<'a>(kv: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    kv.get(key).map(|s| s.as_str()).ok_or_else(|| bad(format!("missing config key '{key}'")))
}

fn kv_parse<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
    kv_get(kv, key)?
        .parse()
        .map_err(|_| bad(format!("config key '{key}' has unparseable value")))
}

fn config_from_kv(kv: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let variant = kv_get(kv, "attention_variant")?;
    let attention_variant = AttentionVariant::parse(variant)
        .ok_or_else(|| bad(format!("unknown attention variant '{variant}'")))?;
    let order = kv_get(kv, "reduce_order")?;
    let reduce_order = ReduceOrder::parse(order)
        .ok_or_else(|| bad(format!("unknown reduce order '{order}'")))?;
    Ok(ModelConfig {
        master_seed: kv_parse(kv, "master_seed")?,
        patch_size: kv_parse(kv, "patch_size")?,
        vision_dim: kv_parse(kv, "vision_dim")?,
        text_table_size: kv_parse(kv, "text_table_size")?,
        agg: AggregatorConfig {
            d_agg: kv_parse(kv, "d_agg")?,
            num_blocks: kv_parse(kv, "num_blocks")?,
            window_size: kv_parse(kv, "window_size")?,
            num_heads: kv_parse(kv, "num_heads")?,
            attention_variant,
            shift_second: kv_parse(kv, "shift_second")?,
            mlp_ratio: kv_parse(kv, "mlp_ratio")?,
        },
        sigma_color: kv_parse(kv, "sigma_color")?,
        sigma_spatial: match kv.get("sigma_spatial") {
            Some(v) => Some(
                v.parse()
                    .map_err(|_| bad("config key 'sigma_spatial' has unparseable value"))?,
            ),
            None => None,
        },
        reduce_order,
    })
}

/// Serializes the model configuration and every named parameter.
pub fn save_model(model: &mut Model, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;

    let kv = config_to_kv(&model.cfg);
    w.write_all(&(kv.len() as u32).to_le_bytes())?;
    for (k, v) in &kv {
        write_string(&mut w, k)?;
        write_string(&mut w, v)?;
    }

    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    model.visit("", &mut |name, _, p| {
        tensors.push((
            name.to_string(),
            p.value.shape().to_vec(),
            p.value.iter().map(|v| *v as f32).collect(),
        ));
    });
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, shape, values) in &tensors {
        write_string(&mut w, name)?;
        if shape.len() > u8::MAX as usize {
            return Err(bad("tensor rank exceeds checkpoint limit"));
        }
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Rebuilds a model from a checkpoint, verifying magic, version, and
/// that the tensor set matches the architecture exactly.
pub fn load_model(path: &Path) -> Result<Model> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(bad("bad magic; not a checkpoint file"));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }

    let nkv = read_u32(&mut r, "config count")?;
    let mut kv = BTreeMap::new();
    for _ in 0..nkv {
        let k = read_string(&mut r, "config key")?;
        let v = read_string(&mut r, "config value")?;
        kv.insert(k, v);
    }
    let cfg = config_from_kv(&kv)?;

    let ntensors = read_u32(&mut r, "tensor count")?;
    let mut tensors: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    for _ in 0..ntensors {
        let name = read_string(&mut r, "tensor name")?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank, "tensor rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r, "tensor dim")? as usize);
        }
        let count: usize = shape.iter().product();
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            let mut b = [0u8; 4];
            read_exact(&mut r, &mut b, "tensor data")?;
            values.push(f32::from_le_bytes(b) as f64);
        }
        let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&shape), values)
            .map_err(|_| bad(format!("tensor '{name}' data does not match its shape")))?;
        if tensors.insert(name.clone(), arr).is_some() {
            return Err(bad(format!("duplicate tensor '{name}'")));
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(bad("trailing bytes after last tensor"));
    }

    let mut model = Model::new(cfg)?;
    let mut missing = Vec::new();
    model.visit("", &mut |name, _, p| match tensors.remove(name) {
        Some(arr) if arr.shape() == p.value.shape() => p.value.assign(&arr),
        Some(arr) => missing.push(format!(
            "tensor '{name}' has shape {:?}, expected {:?}",
            arr.shape(),
            p.value.shape()
        )),
        None => missing.push(format!("missing tensor '{name}'")),
    });
    if let Some(first) = missing.first() {
        return Err(bad(first.clone()));
    }
    if let Some((name, _)) = tensors.into_iter().next() {
        return Err(bad(format!("unknown tensor '{name}' for this architecture")));
    }
    Ok(model)
}
