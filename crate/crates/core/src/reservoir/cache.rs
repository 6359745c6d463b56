//! On-disk cache of raw (unstandardized) state matrices.
//!
//! File layout, little endian: magic `ARCSTATE`, `u32` format version,
//! `u64` rows, `u64` cols, then `rows * cols` `f64` values in row-major
//! order.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Serialize;

use super::{ReservoirBackend, StateMatrix};
use crate::io::{atomic_write, sha256_hex};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"ARCSTATE";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct StateCache {
    dir: PathBuf,
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    version: u32,
    dataset: &'a str,
    backend: &'a ReservoirBackend,
    substeps_per_node: usize,
    seed: u64,
}

impl StateCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Cache key from the dataset identity, backend configuration and seed.
    pub fn key(dataset_id: &str, backend: &ReservoirBackend, seed: u64) -> String {
        let material = KeyMaterial {
            version: VERSION,
            dataset: dataset_id,
            backend,
            substeps_per_node: backend.laser.substeps_per_node,
            seed,
        };
        sha256_hex(&serde_json::to_vec(&material).expect("key material serializes"))
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.states"))
    }

    pub fn load(&self, key: &str) -> Result<Option<StateMatrix>> {
        let path = self.path(key);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        decode(&bytes).map(Some)
    }

    pub fn store(&self, key: &str, states: &StateMatrix) -> Result<()> {
        atomic_write(&self.path(key), &encode(states))
    }
}

pub fn encode(states: &StateMatrix) -> Vec<u8> {
    let d = states.data();
    let mut out = Vec::with_capacity(28 + 8 * d.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(d.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(d.ncols() as u64).to_le_bytes());
    for r in 0..d.nrows() {
        for c in 0..d.ncols() {
            out.extend_from_slice(&d[(r, c)].to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<StateMatrix> {
    let bad = |m: &str| Error::Format(format!("state cache: {m}"));
    if bytes.len() < 28 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
    let body = &bytes[28..];
    if body.len() != rows * cols * 8 {
        return Err(bad("truncated body"));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    StateMatrix::new(DMatrix::from_row_slice(rows, cols, &values))
}
