//! Versioned checkpoint container: named parameter groups, trainability
//! flags, step counter, optimizer moments, and the full config (text + hash)
//! the parameters belong to. Loading rejects a config-hash mismatch unless
//! forced.
//!
//! Values are stored as little-endian f64 bits, which round-trips both f32
//! and f64 parameters exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::core::config::{hex_string, PipelineConfig};
use crate::error::{Error, Result};
use crate::model::{ModelState, GROUPS};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"DRCKPT01";

/// Optimizer moments captured alongside the parameters so training can
/// resume exactly.
#[derive(Debug, Clone, Default)]
pub struct OptimizerSnapshot {
    pub t: u64,
    /// Param path -> (first moment, second moment), flattened row-major.
    pub entries: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    state: &ModelState<F>,
    cfg: &PipelineConfig,
    optimizer: Option<&OptimizerSnapshot>,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(std::mem::size_of::<F>() as u8);
    let hash = cfg.hash();
    write_str16(&mut buf, &hash);
    write_str32(&mut buf, &cfg.canonical_text());
    buf.extend_from_slice(&state.step.to_le_bytes());

    buf.extend_from_slice(&(GROUPS.len() as u32).to_le_bytes());
    for group in GROUPS {
        write_str16(&mut buf, group);
        buf.push(u8::from(state.trainable.get(group).copied().unwrap_or(false)));
        let mut params: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        state.model.visit_group(group, &mut |name, value| {
            params.push((
                name,
                value.shape().to_vec(),
                value.iter().map(|v| v.to_float()).collect(),
            ));
        });
        buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, shape, data) in params {
            write_str16(&mut buf, &name);
            buf.push(shape.len() as u8);
            for d in &shape {
                buf.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    match optimizer {
        None => buf.push(0),
        Some(snap) => {
            buf.push(1);
            buf.extend_from_slice(&snap.t.to_le_bytes());
            buf.extend_from_slice(&(snap.entries.len() as u32).to_le_bytes());
            for (name, (m, v)) in &snap.entries {
                write_str16(&mut buf, name);
                buf.extend_from_slice(&(m.len() as u32).to_le_bytes());
                for x in m {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }

    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub struct LoadedCheckpoint<F: Scalar> {
    pub state: ModelState<F>,
    pub optimizer: Option<OptimizerSnapshot>,
    pub config: PipelineConfig,
}

/// Loads a checkpoint. When `expected_hash` is given and differs from the
/// stored config hash, loading fails unless `force` is set.
pub fn load_checkpoint<F: Scalar>(
    path: &Path,
    expected_hash: Option<&str>,
    force: bool,
) -> Result<LoadedCheckpoint<F>> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("{path:?} is not a checkpoint")));
    }
    let _dtype = r.u8()?;
    let stored_hash = r.str16()?;
    let config_text = r.str32()?;
    let step = r.u64()?;

    if let Some(expected) = expected_hash {
        if expected != stored_hash && !force {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {stored_hash:.12}… vs current {expected:.12}…; pass --force to override"
            )));
        }
    }
    let config = PipelineConfig::parse_exact(&config_text)?;
    let mut state = ModelState::<F>::new(&config)?;
    state.step = step;
    state.config_hash = stored_hash;

    let n_groups = r.u32()? as usize;
    for _ in 0..n_groups {
        let group = r.str16()?;
        let trainable = r.u8()? != 0;
        state.trainable.insert(group.clone(), trainable);
        let n_params = r.u32()? as usize;
        let mut loaded: BTreeMap<String, ArrayD<F>> = BTreeMap::new();
        for _ in 0..n_params {
            let name = r.str16()?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(F::from_float(r.f64()?));
            }
            loaded.insert(
                name,
                ArrayD::from_shape_vec(IxDyn(&shape), data)
                    .map_err(|e| Error::Checkpoint(format!("bad param shape: {e}")))?,
            );
        }
        let mut missing = Vec::new();
        state.model.visit_group_mut(&group, &mut |name, value| {
            match loaded.remove(&name) {
                Some(arr) if arr.shape() == value.shape() => *value = arr,
                Some(arr) => missing.push(format!(
                    "{group}/{name}: shape {:?} vs expected {:?}",
                    arr.shape(),
                    value.shape()
                )),
                None => missing.push(format!("{group}/{name}: absent")),
            }
        });
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch: {}",
                missing.join("; ")
            )));
        }
        if !loaded.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has unknown parameters in {group}: {:?}",
                loaded.keys().collect::<Vec<_>>()
            )));
        }
    }

    let optimizer = if r.u8()? == 1 {
        let t = r.u64()?;
        let n = r.u32()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..n {
            let name = r.str16()?;
            let len = r.u32()? as usize;
            let mut m = Vec::with_capacity(len);
            for _ in 0..len {
                m.push(r.f64()?);
            }
            let mut v = Vec::with_capacity(len);
            for _ in 0..len {
                v.push(r.f64()?);
            }
            entries.insert(name, (m, v));
        }
        Some(OptimizerSnapshot { t, entries })
    } else {
        None
    };

    Ok(LoadedCheckpoint {
        state,
        optimizer,
        config,
    })
}

/// SHA-256 of a checkpoint file, for provenance records.
pub fn file_hash(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 8192];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex_string(&hasher.finalize()))
}

fn write_str16(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u16).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn write_str32(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str16(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("bad string: {e}")))
    }

    fn str32(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("bad string: {e}")))
    }
}
