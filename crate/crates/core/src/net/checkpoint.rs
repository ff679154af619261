//! Binary checkpoint format.
//!
//! ```text
//! "SPRNTCK1"                      8-byte magic
//! u32 LE                          header length
//! JSON header                     {"config", "meta", "sets"}
//! repeated entry:
//!   u32 LE name length, UTF-8 name ("{set}/{param}")
//!   u32 LE ndim, ndim × u64 LE dims
//!   prod(dims) × f32 LE
//! ```
//!
//! A set is one full parameter tree (weights, EMA weights, optimizer
//! moments). Entries appear in set order, then in [`ModelParams::named`] order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Result, SprintError};

const MAGIC: &[u8; 8] = b"SPRNTCK1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: serde_json::Value,
    sets: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: serde_json::Value,
    pub sets: BTreeMap<String, ModelParams<f32>>,
}

impl Checkpoint {
    pub fn set(&self, name: &str) -> Result<&ModelParams<f32>> {
        self.sets
            .get(name)
            .ok_or_else(|| SprintError::Checkpoint(format!("no parameter set `{name}`")))
    }

    pub fn take(&mut self, name: &str) -> Result<ModelParams<f32>> {
        self.sets
            .remove(name)
            .ok_or_else(|| SprintError::Checkpoint(format!("no parameter set `{name}`")))
    }
}

/// Writes to a temporary sibling and renames, so a crash never leaves a
/// truncated checkpoint under the final name.
pub fn save(
    path: &Path,
    meta: serde_json::Value,
    sets: &[(&str, &ModelParams<f32>)],
) -> Result<()> {
    let Some((_, first)) = sets.first() else {
        return Err(SprintError::Checkpoint("nothing to save".into()));
    };
    if let Some((name, _)) = sets.iter().find(|(_, p)| p.config != first.config) {
        return Err(SprintError::Checkpoint(format!(
            "set `{name}` has a different model config"
        )));
    }
    let header = Header {
        config: first.config.clone(),
        meta,
        sets: sets.iter().map(|(n, _)| n.to_string()).collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("partial");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for (set, params) in sets {
            for p in params.named() {
                let name = format!("{set}/{}", p.name);
                w.write_all(&(name.len() as u32).to_le_bytes())?;
                w.write_all(name.as_bytes())?;
                w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
                for &d in &p.shape {
                    w.write_all(&(d as u64).to_le_bytes())?;
                }
                for &v in p.data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SprintError::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let len = read_u32(&mut r)? as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    header.config.validate()?;

    let mut sets = BTreeMap::new();
    for set in &header.sets {
        let mut params = ModelParams::<f32>::init(&header.config, &mut ChaCha8Rng::seed_from_u64(0))?;
        for p in params.named_mut() {
            let expected = format!("{set}/{}", p.name);
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            if name != expected.as_bytes() {
                return Err(SprintError::Checkpoint(format!(
                    "expected entry `{expected}`, found `{}`",
                    String::from_utf8_lossy(&name)
                )));
            }
            let ndim = read_u32(&mut r)? as usize;
            let dims = (0..ndim)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if dims != p.shape {
                return Err(SprintError::Checkpoint(format!(
                    "entry `{expected}` has shape {dims:?}, model expects {:?}",
                    p.shape
                )));
            }
            let mut buf = vec![0u8; 4 * p.data.len()];
            r.read_exact(&mut buf)?;
            for (v, b) in p.data.iter_mut().zip(buf.chunks_exact(4)) {
                *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            }
        }
        sets.insert(set.clone(), params);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(SprintError::Checkpoint(format!(
            "{} trailing bytes after the last entry",
            rest.len()
        )));
    }
    Ok(Checkpoint {
        config: header.config,
        meta: header.meta,
        sets,
    })
}
