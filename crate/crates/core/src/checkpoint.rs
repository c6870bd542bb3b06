//! Model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "LIEMEMCK" | u32 version | u32 header length | header text
//! u32 array count
//! per array: u32 name length | name | u32 ndim | u64 dims... | f32 data...
//! ```
//!
//! The header is flat `model.key = value` text plus `schedule_step`.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::config::{flatten, parse_flat};
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::params::ParamSet;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"LIEMEMCK";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<S: Scalar, W: Write>(mut out: W, model: &Model<S>) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let mut header = flatten("model", model.config())?;
    header.push_str(&format!("schedule_step = {}\n", model.schedule_step));
    write_u32(&mut out, header.len())?;
    out.write_all(header.as_bytes())?;
    let params = model.params();
    write_u32(&mut out, params.len())?;
    for (name, t) in params.iter() {
        write_u32(&mut out, name.len())?;
        out.write_all(name.as_bytes())?;
        write_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * t.len());
        for &v in t.data() {
            buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<S: Scalar, R: Read>(mut input: R) -> Result<Model<S>> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = read_u32(&mut input)? as usize;
    let header = String::from_utf8(read_bytes(&mut input, header_len)?).map_err(|_| bad("header is not UTF-8"))?;
    let mut doc = parse_flat(&header)?;
    let schedule_step = doc.remove("schedule_step").and_then(|v| v.as_u64()).unwrap_or(0);
    let model_doc = doc.remove("model").ok_or_else(|| bad("header has no model section"))?;
    let config: ModelConfig = serde_json::from_value(model_doc).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let count = read_u32(&mut input)? as usize;
    let mut params = ParamSet::<S>::new();
    for _ in 0..count {
        let name_len = read_u32(&mut input)? as usize;
        let name = String::from_utf8(read_bytes(&mut input, name_len)?).map_err(|_| bad("name is not UTF-8"))?;
        let ndim = read_u32(&mut input)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            input.read_exact(&mut b).map_err(|_| bad("truncated shape"))?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = read_bytes(&mut input, 4 * n)?;
        let data = raw.chunks_exact(4).map(|c| S::c(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
        params.add(name, Tensor::new(shape, data)?);
    }
    let mut model = Model::with_params(config, params)?;
    model.schedule_step = schedule_step;
    Ok(model)
}

pub fn save<S: Scalar>(path: &Path, model: &Model<S>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(file), model)
}

pub fn load<S: Scalar>(path: &Path) -> Result<Model<S>> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}

fn write_u32<W: Write>(out: &mut W, n: usize) -> Result<()> {
    let v = u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{n} does not fit in 32 bits")))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated file".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes<R: Read>(input: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    input.read_exact(&mut buf).map_err(|_| Error::Checkpoint("truncated file".into()))?;
    Ok(buf)
}
