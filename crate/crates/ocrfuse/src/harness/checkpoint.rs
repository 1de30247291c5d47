//! Self-describing binary checkpoint: magic, version, JSON header (config,
//! iteration, RNG state, optimizer step, named parameter shapes), then raw
//! little-endian f64 buffers in header order — parameter values, first
//! Adam moments, second Adam moments. Save → load → save is byte-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::train::TrainConfig;
use crate::tensor::{ParamStore, TensorValue};

pub const MAGIC: &[u8; 8] = b"OFCKPT01";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: TrainConfig,
    pub iteration: usize,
    pub rng_state: [u64; 4],
    pub adam_step: usize,
    pub params: Vec<ParamMeta>,
}

/// In-memory checkpoint: header plus the Adam moment buffers.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub store: ParamStore,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
}

fn write_f64s(out: &mut impl Write, data: &[f64]) -> Result<()> {
    for v in data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(inp: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    inp.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    let header = serde_json::to_vec(&ckpt.header)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for (_, p) in ckpt.store.iter() {
        write_f64s(&mut out, &p.value.data)?;
    }
    for m in &ckpt.adam_m {
        write_f64s(&mut out, m)?;
    }
    for v in &ckpt.adam_v {
        write_f64s(&mut out, v)?;
    }
    out.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut inp = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    inp.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let mut len = [0u8; 8];
    inp.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut header = vec![0u8; len];
    inp.read_exact(&mut header)?;
    let header: CheckpointHeader = serde_json::from_slice(&header)
        .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    let mut store = ParamStore::new();
    for meta in &header.params {
        let n: usize = meta.shape.iter().product();
        let data = read_f64s(&mut inp, n)?;
        store.add(&meta.name, TensorValue::new(meta.shape.clone(), data, true));
    }
    let mut adam_m = Vec::with_capacity(header.params.len());
    for meta in &header.params {
        let n: usize = meta.shape.iter().product();
        adam_m.push(read_f64s(&mut inp, n)?);
    }
    let mut adam_v = Vec::with_capacity(header.params.len());
    for meta in &header.params {
        let n: usize = meta.shape.iter().product();
        adam_v.push(read_f64s(&mut inp, n)?);
    }
    Ok(Checkpoint {
        header,
        store,
        adam_m,
        adam_v,
    })
}
