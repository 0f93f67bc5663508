//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes   "CURECKPT"
//! version    u32 LE
//! hdr_len    u64 LE
//! header     hdr_len bytes of UTF-8 JSON (CheckpointHeader)
//! blobs      f32 LE values of every parameter, in header order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::scalar::Real;

pub const MAGIC: &[u8; 8] = b"CURECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub params: Vec<ParamEntry>,
    pub hyperparameters: serde_json::Value,
    pub seed: u64,
}

pub fn write_checkpoint<F: Real, W: Write>(
    mut w: W,
    params: &[(String, &Tensor<F>)],
    hyperparameters: serde_json::Value,
    seed: u64,
) -> Result<()> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        params: params
            .iter()
            .map(|(n, t)| ParamEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        hyperparameters,
        seed,
    };
    let hdr = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(hdr.len() as u64).to_le_bytes())?;
    w.write_all(&hdr)?;
    for (_, t) in params {
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<F: Real, R: Read>(mut r: R) -> Result<(CheckpointHeader, Vec<(String, Tensor<F>)>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut hdr = vec![0u8; len];
    r.read_exact(&mut hdr)?;
    let header: CheckpointHeader = serde_json::from_slice(&hdr)?;
    let mut out = Vec::with_capacity(header.params.len());
    for e in &header.params {
        let n: usize = e.shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| F::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        out.push((e.name.clone(), Tensor::new(&e.shape, data)?));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok((header, out))
}

/// Writes to a sibling temp file and renames over `path`.
pub fn save<F: Real>(
    path: &Path,
    params: &[(String, &Tensor<F>)],
    hyperparameters: serde_json::Value,
    seed: u64,
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        write_checkpoint(f, params, hyperparameters, seed)?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<F: Real>(path: &Path) -> Result<(CheckpointHeader, Vec<(String, Tensor<F>)>)> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(f)
}
