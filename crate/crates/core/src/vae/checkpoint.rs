//! VAE1 checkpoint format (little-endian):
//! magic `VAE1`, u32 version, u32 layer count, per layer (u32 rows, u32 cols, u8 activation,
//! f32 weights row-major, f32 biases), u8 Adam flag, optional Adam state (u64 step, f32 first
//! moments, f32 second moments, both in parameter storage order), f64 beta, u64 seed.
//!
//! Layers are stored trunk first, then the mean head, the log-variance head and the decoder.
//! On load the heads are two consecutive layers with three outputs followed by a layer with
//! three inputs; if several pairs qualify, the one giving a mirrored decoder wins.

use std::path::Path;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

use super::{Activation, AdamState, Layer, Mlp, VaeModel, LATENT_DIM};

const MAGIC: &[u8; 4] = b"VAE1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: VaeModel,
    pub adam: Option<AdamState>,
    pub beta: f64,
    pub seed: u64,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(FORMAT_VERSION);
    let layers = ckpt.model.layers();
    w.u32(layers.len() as u32);
    for l in layers {
        w.u32(l.rows as u32);
        w.u32(l.cols as u32);
        w.u8(l.activation.tag());
        for v in l.weights.iter().chain(&l.bias) {
            w.f32(*v as f32);
        }
    }
    match &ckpt.adam {
        Some(s) => {
            w.u8(1);
            w.u64(s.step);
            for v in s.m.iter().chain(&s.v) {
                w.f32(*v as f32);
            }
        }
        None => w.u8(0),
    }
    w.f64(ckpt.beta);
    w.u64(ckpt.seed);
    w.buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let off = r.offset();
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            off,
            format!("unsupported checkpoint version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let n_layers = r.u32("layer count")? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(64));
    for _ in 0..n_layers {
        let off = r.offset();
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let tag = r.u8("activation")?;
        let activation = Activation::from_tag(tag)
            .ok_or_else(|| Error::format(off + 8, format!("unknown activation tag {tag}")))?;
        let count = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_add(rows))
            .filter(|n| n.saturating_mul(4) <= r.remaining())
            .ok_or_else(|| {
                Error::format(off, format!("truncated file: layer {rows}x{cols} does not fit"))
            })?;
        let mut vals = Vec::with_capacity(count);
        for _ in 0..count {
            vals.push(r.f32("parameter")? as f64);
        }
        let bias = vals.split_off(rows * cols);
        let layer = Layer::new(rows, cols, vals, bias, activation)
            .map_err(|e| Error::format(off, e.to_string()))?;
        layers.push(layer);
    }
    let model = assemble(layers).map_err(|e| Error::format(8, e.to_string()))?;

    let adam = match r.u8("adam flag")? {
        0 => None,
        1 => {
            let step = r.u64("adam step")?;
            let n = model.n_params();
            if n.saturating_mul(8) > r.remaining() {
                return Err(Error::format(r.offset(), "truncated file: Adam moments"));
            }
            let mut m = Vec::with_capacity(n);
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                m.push(r.f32("adam m")? as f64);
            }
            for _ in 0..n {
                v.push(r.f32("adam v")? as f64);
            }
            Some(AdamState { step, m, v })
        }
        other => {
            return Err(Error::format(r.offset() - 1, format!("bad Adam flag {other}")));
        }
    };
    let beta = r.f64("beta")?;
    let seed = r.u64("seed")?;
    r.finish()?;
    Ok(Checkpoint {
        model,
        adam,
        beta,
        seed,
    })
}

fn assemble(mut layers: Vec<Layer>) -> Result<VaeModel> {
    let n = layers.len();
    let candidates: Vec<usize> = (1..n.saturating_sub(2))
        .filter(|&i| {
            layers[i].rows == LATENT_DIM
                && layers[i + 1].rows == LATENT_DIM
                && layers[i].cols == layers[i + 1].cols
                && layers[i + 2].cols == LATENT_DIM
        })
        .collect();
    // a mirrored decoder has one layer more than the trunk
    let mirrored = (n >= 3 && (n - 3).is_multiple_of(2)).then(|| (n - 3) / 2);
    let split = mirrored
        .filter(|m| candidates.contains(m))
        .or_else(|| candidates.first().copied())
        .ok_or_else(|| Error::invalid("no latent heads found among checkpoint layers"))?;
    let decoder = layers.split_off(split + 2);
    let head_logvar = layers.pop().expect("head present");
    let head_mean = layers.pop().expect("head present");
    VaeModel::from_parts(Mlp::new(layers)?, head_mean, head_logvar, Mlp::new(decoder)?)
}

pub fn checkpoint_save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_file(path, &encode_checkpoint(ckpt))
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?)
}
