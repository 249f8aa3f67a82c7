// SPDX-License-Identifier: Apache-2.0
//! Checkpoint container: `WFCKPT01`, u64 manifest length, JSON manifest,
//! then every parameter as little-endian f64 in manifest order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

const MAGIC: &[u8; 8] = b"WFCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in f64 elements from the start of the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    params: Vec<ParamEntry>,
    meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<ParamEntry>,
    pub params: Vec<Tensor>,
    /// Model configuration, normalization statistics, optimizer metadata.
    pub meta: serde_json::Value,
}

pub fn write_checkpoint(
    mut w: impl Write,
    names: &[String],
    params: &[Tensor],
    meta: serde_json::Value,
) -> Result<(), TensorError> {
    let mut offset = 0;
    let entries = names
        .iter()
        .zip(params)
        .map(|(n, p)| {
            let e = ParamEntry {
                name: n.clone(),
                shape: p.shape.clone(),
                offset,
            };
            offset += p.len();
            e
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest { params: entries, meta }).expect("manifest serializes");
    let mut buf = Vec::with_capacity(16 + manifest.len() + 8 * offset);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    buf.extend_from_slice(&manifest);
    for p in params {
        for v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Checkpoint, TensorError> {
    let corrupt = |s: &str| TensorError::Corrupt(s.to_string());
    let mut head = [0u8; 16];
    r.read_exact(&mut head).map_err(|_| corrupt("truncated header"))?;
    if &head[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mlen = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes")) as usize;
    if mlen > 1 << 30 {
        return Err(corrupt("manifest too large"));
    }
    let mut mbytes = vec![0u8; mlen];
    r.read_exact(&mut mbytes).map_err(|_| corrupt("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&mbytes).map_err(|e| TensorError::Corrupt(e.to_string()))?;
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let mut params = Vec::with_capacity(manifest.params.len());
    let mut expect = 0;
    for e in &manifest.params {
        let n: usize = e.shape.iter().product();
        if e.offset != expect || 8 * (e.offset + n) > blob.len() {
            return Err(corrupt("parameter blob does not match manifest"));
        }
        let data: Vec<f64> = blob[8 * e.offset..8 * (e.offset + n)]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(Tensor::new(e.shape.clone(), data)?);
        expect += n;
    }
    if 8 * expect != blob.len() {
        return Err(corrupt("trailing bytes after parameter blob"));
    }
    Ok(Checkpoint {
        entries: manifest.params,
        params,
        meta: manifest.meta,
    })
}

impl Checkpoint {
    /// Checks names and shapes against an expected parameter layout.
    pub fn verify_layout(&self, names: &[String], shapes: &[Vec<usize>]) -> Result<(), TensorError> {
        if self.entries.len() != names.len() {
            return Err(TensorError::Manifest(format!(
                "{} parameters stored, {} expected",
                self.entries.len(),
                names.len()
            )));
        }
        for ((e, n), s) in self.entries.iter().zip(names).zip(shapes) {
            if &e.name != n || &e.shape != s {
                return Err(TensorError::Manifest(format!(
                    "stored {} {:?}, expected {} {:?}",
                    e.name, e.shape, n, s
                )));
            }
        }
        Ok(())
    }
}
