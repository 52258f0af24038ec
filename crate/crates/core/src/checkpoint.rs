//! Binary checkpoint and memory-snapshot formats. All integers and floats
//! are little-endian.
//!
//! Checkpoint:
//!
//! ```text
//! b"TTMCKPT1"
//! u32 manifest_len, manifest (canonical JSON: config, seed, step)
//! u32 param_count
//! per parameter, in sorted name order:
//!     u32 name_len, name (UTF-8), u32 rank, rank × u32 dims, f32 data
//! ```
//!
//! Memory snapshot: `u32 rank, rank × u32 dims, f32 data` (row-major).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{canonical_json, RunConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TTMCKPT1";
const MAX_RANK: u32 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: RunConfig,
    pub seed: u64,
    pub step: usize,
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn put_tensor(w: &mut impl Write, t: &Tensor<f32>) -> Result<()> {
    put_u32(w, t.rank())?;
    for &d in t.shape() {
        put_u32(w, d)?;
    }
    let mut bytes = Vec::with_capacity(4 * t.numel());
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

fn get_tensor(r: &mut impl Read) -> Result<Tensor<f32>> {
    let rank = get_u32(r)?;
    if rank as u32 > MAX_RANK {
        return Err(Error::Format(format!("tensor rank {rank} exceeds {MAX_RANK}")));
    }
    let shape = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; 4 * n];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(&shape, data)
}

pub fn write_checkpoint(w: &mut impl Write, manifest: &Manifest, store: &ParamStore<f32>) -> Result<()> {
    w.write_all(MAGIC)?;
    let m = canonical_json(manifest)?;
    put_u32(w, m.len())?;
    w.write_all(m.as_bytes())?;
    put_u32(w, store.len())?;
    for (name, t) in store.iter() {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<(Manifest, ParamStore<f32>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let len = get_u32(r)?;
    let mut m = vec![0u8; len];
    r.read_exact(&mut m)?;
    let manifest: Manifest = serde_json::from_slice(&m)?;
    let count = get_u32(r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = get_u32(r)?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        store.insert(&name, get_tensor(r)?)?;
    }
    Ok((manifest, store))
}

pub fn save_checkpoint(path: &Path, manifest: &Manifest, store: &ParamStore<f32>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, manifest, store)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Manifest, ParamStore<f32>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut r)
}

pub fn write_memory(w: &mut impl Write, memory: &Tensor<f32>) -> Result<()> {
    put_tensor(w, memory)
}

pub fn read_memory(r: &mut impl Read) -> Result<Tensor<f32>> {
    get_tensor(r)
}
