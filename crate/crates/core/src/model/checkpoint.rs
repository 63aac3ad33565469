//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes   "CMATCKPT"
//! version      u32
//! manifest_len u32
//! manifest     JSON      {format_version, dims, steps, params: [{name, shape}]}
//! per array, in manifest order:
//!   name_len   u32
//!   name       UTF-8
//!   rank       u32
//!   shape      rank × u64
//!   values     prod(shape) × f64
//! ```
//!
//! Loading checks every array's name and shape against the manifest and
//! against the shapes implied by the manifest's dimensions.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

use super::{Dims, ModelError, ModelParameters, Param, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CMATCKPT";

/// Parameters plus the communication depth they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParameters,
    pub steps: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dims: Dims,
    steps: usize,
    params: Vec<ArrayEntry>,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<()> {
    let dims = *ckpt.params.dims();
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        dims,
        steps: ckpt.steps,
        params: Param::ALL
            .iter()
            .map(|p| ArrayEntry {
                name: p.name().to_string(),
                shape: p.shape(&dims),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| bad(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for (p, t) in Param::ALL.iter().zip(ckpt.params.tensors()) {
        let name = p.name().as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
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

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let len = read_u32(&mut r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let manifest: Manifest = serde_json::from_slice(&json).map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.format_version != version {
        return Err(bad("manifest version disagrees with header"));
    }
    if manifest.params.len() != Param::ALL.len() {
        return Err(bad(format!("manifest lists {} arrays", manifest.params.len())));
    }
    let mut tensors = Vec::with_capacity(Param::ALL.len());
    for (p, entry) in Param::ALL.iter().zip(&manifest.params) {
        let expected = p.shape(&manifest.dims);
        if entry.name != p.name() || entry.shape != expected {
            return Err(bad(format!(
                "manifest entry {:?} {:?} does not match {} {:?}",
                entry.name,
                entry.shape,
                p.name(),
                expected
            )));
        }
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        if name != entry.name.as_bytes() {
            return Err(bad(format!("array {:?} out of order", String::from_utf8_lossy(&name))));
        }
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        if shape != entry.shape {
            return Err(bad(format!("array {} has shape {shape:?}, manifest says {:?}", entry.name, entry.shape)));
        }
        let count: usize = shape.iter().product();
        let mut raw = vec![0u8; count * 8];
        r.read_exact(&mut raw)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push(Tensor::new(shape, values)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after last array"));
    }
    Ok(Checkpoint {
        params: ModelParameters::from_tensors(manifest.dims, tensors)?,
        steps: manifest.steps,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), ckpt)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
