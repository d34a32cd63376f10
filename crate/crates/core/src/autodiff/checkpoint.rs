//! Flat binary parameter files.
//!
//! Layout (all integers little-endian): the 8-byte magic `SGCKPT\0\0`, a
//! `u32` format version, a `u32` entry count, then per entry a `u32` name
//! length, the UTF-8 name, a `u32` rank, `rank` `u64` dimensions and the raw
//! `f64` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{AdamState, ParamSet, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SGCKPT\0\0";
pub const VERSION: u32 = 1;

/// Named tensors in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Appends a parameter set under `prefix`.
    pub fn add_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.push(format!("{prefix}{name}"), t.clone());
        }
    }

    /// Appends Adam moments as `<name>.adam_m` / `<name>.adam_v` and the step
    /// counter as `<prefix>adam_t`.
    pub fn add_adam(&mut self, prefix: &str, params: &ParamSet, state: &AdamState) {
        for ((name, _), (m, v)) in params.iter().zip(state.m.iter().zip(&state.v)) {
            self.push(format!("{prefix}{name}.adam_m"), m.clone());
            self.push(format!("{prefix}{name}.adam_v"), v.clone());
        }
        self.push(format!("{prefix}adam_t"), Tensor::scalar(state.t as f64));
    }

    pub fn adam_state(&self, prefix: &str, params: &ParamSet) -> Result<AdamState> {
        let mut state = AdamState::new(params);
        for (i, name) in params.names().iter().enumerate() {
            for (suffix, slot) in [("adam_m", &mut state.m[i]), ("adam_v", &mut state.v[i])] {
                let key = format!("{prefix}{name}.{suffix}");
                let t = self.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing `{key}`")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!("`{key}` has shape {:?}", t.shape())));
                }
                *slot = t.clone();
            }
        }
        let key = format!("{prefix}adam_t");
        state.t = self.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing `{key}`")))?.item() as u64;
        Ok(state)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 8];
            r.read_exact(&mut raw)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            entries.push((name, Tensor::new(&shape, data)?));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
