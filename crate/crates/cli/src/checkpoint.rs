//! Binary checkpoint files: magic "VGAN", version, step, the parameter
//! tensors, the optimizer-moment tensors, and the training RNG state.
//! save → load → save is byte-identical.

use std::fs;
use std::path::Path;
use thiserror::Error;
use vgan_core::gan::{CheckpointState, Param};

const MAGIC: &[u8; 4] = b"VGAN";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("truncated checkpoint file")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn push_tensor(out: &mut Vec<u8>, p: &Param) -> Result<(), CheckpointError> {
    let name = p.name.as_bytes();
    if name.len() > u16::MAX as usize {
        return Err(CheckpointError::Corrupt(format!(
            "tensor name too long: {}",
            p.name
        )));
    }
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name);
    if p.shape.len() > u8::MAX as usize {
        return Err(CheckpointError::Corrupt(format!(
            "tensor rank too large: {}",
            p.shape.len()
        )));
    }
    out.push(p.shape.len() as u8);
    for &d in &p.shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in &p.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(())
}

pub fn checkpoint_bytes(ck: &CheckpointState) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&ck.version.to_le_bytes());
    out.extend_from_slice(&ck.step.to_le_bytes());
    for tensors in [&ck.params, &ck.moments] {
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for p in tensors.iter() {
            push_tensor(&mut out, p)?;
        }
    }
    out.extend_from_slice(&ck.rng_state);
    Ok(out)
}

pub fn save_checkpoint(ck: &CheckpointState, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, checkpoint_bytes(ck)?).map_err(|e| io_err(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Param, CheckpointError> {
        let name_len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let data = self
            .take(count * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Param { name, shape, data })
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<CheckpointState, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    let step = r.u64()?;
    let mut sections = Vec::new();
    for _ in 0..2 {
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            tensors.push(r.tensor()?);
        }
        sections.push(tensors);
    }
    let rng_state: [u8; 32] = r
        .take(32)?
        .try_into()
        .map_err(|_| CheckpointError::Truncated)?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let moments = sections.pop().unwrap();
    let params = sections.pop().unwrap();
    Ok(CheckpointState {
        version,
        step,
        params,
        moments,
        rng_state,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointState, CheckpointError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    checkpoint_from_bytes(&bytes)
}
