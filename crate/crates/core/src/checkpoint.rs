//! Flat binary checkpoints.
//!
//! Layout: the magic bytes `CCL1`, then for every tensor until end of file:
//! `u32` name length, UTF-8 name, `u32` rank, `rank × u64` dims and
//! `prod(dims) × f64` values. All integers and floats are little-endian.

use std::io::{ErrorKind, Read, Write};

use ndarray::{Array1, Array2};

use crate::error::{CclError, Result};
use crate::network::{Dense, ModelParams};

pub const MAGIC: &[u8; 4] = b"CCL1";

pub fn write_checkpoint<W: Write>(params: &ModelParams, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    for (name, shape, values) in params.named_tensors() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(shape.len() as u32).to_le_bytes())?;
        for d in shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in values {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

struct Tensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Returns `None` on a clean end of file before the next tensor.
fn read_tensor<R: Read>(r: &mut R) -> Result<Option<Tensor>> {
    let mut len = [0u8; 4];
    match r.read(&mut len[..1])? {
        0 => return Ok(None),
        _ => r.read_exact(&mut len[1..])?,
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > 4096 {
        return Err(CclError::Format(format!("tensor name length {len} is implausible")));
    }
    let mut name = vec![0u8; len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|e| CclError::Format(e.to_string()))?;
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 2 {
        return Err(CclError::Format(format!("tensor {name} has unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let count: usize = shape.iter().product();
    let mut values = Vec::with_capacity(count);
    let mut b = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut b)?;
        values.push(f64::from_le_bytes(b));
    }
    Ok(Some(Tensor { name, shape, values }))
}

fn take_dense(tensors: &mut Vec<Tensor>, prefix: &str) -> Result<Dense> {
    let mut grab = |suffix: &str| -> Result<Tensor> {
        let full = format!("{prefix}.{suffix}");
        let pos = tensors
            .iter()
            .position(|t| t.name == full)
            .ok_or_else(|| CclError::Format(format!("checkpoint lacks tensor {full}")))?;
        Ok(tensors.remove(pos))
    };
    let w = grab("weight")?;
    let b = grab("bias")?;
    if w.shape.len() != 2 || b.shape != [w.shape[1]] {
        return Err(CclError::Format(format!(
            "{prefix}: weight {:?} and bias {:?} do not form a layer",
            w.shape, b.shape
        )));
    }
    let weight = Array2::from_shape_vec((w.shape[0], w.shape[1]), w.values)
        .map_err(|e| CclError::Format(e.to_string()))?;
    Ok(Dense {
        weight,
        bias: Array1::from(b.values),
    })
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ModelParams> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => CclError::Format("file too short for a checkpoint".into()),
        _ => e.into(),
    })?;
    if &magic != MAGIC {
        return Err(CclError::Format(format!("bad magic {magic:?}")));
    }
    let mut tensors = Vec::new();
    while let Some(t) = read_tensor(&mut input).map_err(|e| match e {
        CclError::Io(io) if io.kind() == ErrorKind::UnexpectedEof => {
            CclError::Format("checkpoint truncated".into())
        }
        other => other,
    })? {
        tensors.push(t);
    }
    let mut encoder = Vec::new();
    while tensors.iter().any(|t| t.name == format!("encoder.{}.weight", encoder.len())) {
        let prefix = format!("encoder.{}", encoder.len());
        encoder.push(take_dense(&mut tensors, &prefix)?);
    }
    if encoder.is_empty() {
        return Err(CclError::Format("checkpoint has no encoder layers".into()));
    }
    let classifier = take_dense(&mut tensors, "classifier")?;
    let projector = take_dense(&mut tensors, "projector")?;
    if let Some(extra) = tensors.first() {
        return Err(CclError::Format(format!("unexpected tensor {}", extra.name)));
    }
    let chained = encoder
        .windows(2)
        .all(|w| w[0].outputs() == w[1].inputs());
    let width = encoder.last().map(Dense::outputs).unwrap_or(0);
    if !chained || classifier.inputs() != width || projector.inputs() != width {
        return Err(CclError::Format("layer widths do not chain".into()));
    }
    Ok(ModelParams {
        encoder,
        classifier,
        projector,
    })
}
