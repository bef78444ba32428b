//! Binary checkpoints.
//!
//! Layout, all little-endian: magic `MRNN`, version u32, scalar width u32,
//! the model config (integers as u32, `alpha` as f64, flags as u8), the
//! parameter count u32, then per parameter its name (u32 length + UTF-8),
//! rank u32, dims u32 each and the raw scalars.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{atomic_write, checked_product, read_file, Reader};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MRNN";
const VERSION: u32 = 1;
const WHAT: &str = "checkpoint";

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format { what: WHAT, msg: format!("value {v} exceeds u32") })?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn encode_config(cfg: &ModelConfig, out: &mut Vec<u8>) -> Result<()> {
    for v in [cfg.layers, cfg.hidden, cfg.k] {
        put_u32(out, v)?;
    }
    out.extend_from_slice(&cfg.alpha.to_le_bytes());
    for v in [cfg.patch, cfg.lstm_kernel, cfg.in_channels, cfg.height, cfg.width] {
        put_u32(out, v)?;
    }
    out.extend([cfg.enable_mh as u8, cfg.enable_tv as u8, cfg.enable_tm as u8]);
    Ok(())
}

fn decode_config(r: &mut Reader<'_>) -> Result<ModelConfig> {
    let layers = r.u32_le()? as usize;
    let hidden = r.u32_le()? as usize;
    let k = r.u32_le()? as usize;
    let alpha = r.f64_le()?;
    let patch = r.u32_le()? as usize;
    let lstm_kernel = r.u32_le()? as usize;
    let in_channels = r.u32_le()? as usize;
    let height = r.u32_le()? as usize;
    let width = r.u32_le()? as usize;
    let flags = r.take(3)?;
    let flag = |b: u8| match b {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(Error::Format { what: WHAT, msg: format!("flag byte {other}") }),
    };
    Ok(ModelConfig {
        layers,
        hidden,
        k,
        alpha,
        patch,
        lstm_kernel,
        in_channels,
        height,
        width,
        enable_mh: flag(flags[0])?,
        enable_tv: flag(flags[1])?,
        enable_tm: flag(flags[2])?,
    })
}

pub fn encode_checkpoint<S: Scalar>(model: &Model<S>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64 + model.param_count() * S::BYTES);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize)?;
    put_u32(&mut out, S::BYTES)?;
    encode_config(&model.config, &mut out)?;
    put_u32(&mut out, model.params.len())?;
    for (name, t) in model.params.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

/// Rebuilds the model from its config and overwrites every parameter.
pub fn decode_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<Model<S>> {
    let mut r = Reader::new(WHAT, bytes);
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            what: WHAT,
            expected: "MRNN".into(),
            actual: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u32_le()?;
    if version != VERSION {
        return Err(Error::BadVersion { what: WHAT, version });
    }
    let width = r.u32_le()? as usize;
    if width != S::BYTES {
        return Err(Error::Format { what: WHAT, msg: format!("stored {width}-byte scalars, expected {}", S::BYTES) });
    }
    let config = decode_config(&mut r)?;
    let mut model = Model::<S>::new(config, 0)?;
    let count = r.u32_le()? as usize;
    if count != model.params.len() {
        return Err(Error::Format {
            what: WHAT,
            msg: format!("{count} parameters stored, config defines {}", model.params.len()),
        });
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let len = r.u32_le()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format { what: WHAT, msg: "parameter name is not UTF-8".into() })?
            .to_owned();
        let rank = r.u32_le()? as usize;
        let dims = (0..rank).map(|_| Ok(r.u32_le()? as usize)).collect::<Result<Vec<_>>>()?;
        let n = checked_product(WHAT, &dims)?;
        let raw = r.take(checked_product(WHAT, &[n, S::BYTES])?)?;
        let data = raw.chunks_exact(S::BYTES).map(S::read_le).collect();
        model.params.set(&name, Tensor::new(dims, data)?)?;
        let id = model.params.find(&name).expect("set succeeded");
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(Error::Format { what: WHAT, msg: format!("parameter {name} stored twice") });
        }
    }
    if r.remaining() != 0 {
        return Err(Error::Format { what: WHAT, msg: format!("{} trailing bytes", r.remaining()) });
    }
    Ok(model)
}

pub fn save_checkpoint<S: Scalar>(model: &Model<S>, path: &Path) -> Result<()> {
    atomic_write(path, &encode_checkpoint(model)?)
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Model<S>> {
    decode_checkpoint(&read_file(path)?)
}
