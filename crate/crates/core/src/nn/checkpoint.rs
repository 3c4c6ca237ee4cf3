//! Binary checkpoints.
//!
//! Model file: `b"PJDM"`, `u32` version, `u32` descriptor length, UTF-8
//! descriptor (`<architecture> precond=<preconditioning>`), `u64` schedule
//! fingerprint, `u64` parameter count, then every parameter as `f32` LE in
//! canonical layout order.
//!
//! Optimizer sidecar: `b"PJDO"`, `u32` version, the five AdamW
//! hyperparameters as `f64`, `u64` step, `u64` count, then `m` and `v` as
//! `f64` LE.

use std::fs;
use std::path::Path;

use super::adamw::{AdamW, AdamWConfig};
use super::model::{Architecture, DenoiserModel, Preconditioning};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"PJDM";
pub const OPT_MAGIC: &[u8; 4] = b"PJDO";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A model together with the fingerprint of the schedule it was trained for.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: DenoiserModel,
    pub schedule_hash: u64,
}

pub fn encode_checkpoint(model: &DenoiserModel, schedule_hash: u64) -> Vec<u8> {
    let descriptor = format!(
        "{} precond={}",
        model.architecture(),
        model.preconditioning()
    );
    let params = model.params();
    let mut out = Vec::with_capacity(32 + descriptor.len() + 4 * params.len());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(descriptor.len() as u32).to_le_bytes());
    out.extend_from_slice(descriptor.as_bytes());
    out.extend_from_slice(&schedule_hash.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(*p as f32).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::Format(format!(
                "missing {} magic",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn count(&mut self, elem_size: usize) -> Result<usize> {
        let n = self.u64()?;
        let remaining = (self.bytes.len() - self.pos) as u64;
        if n.checked_mul(elem_size as u64)
            .is_none_or(|b| b > remaining)
        {
            return Err(Error::Format(format!("count {n} exceeds file size")));
        }
        Ok(n as usize)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(MODEL_MAGIC)?;
    let len = r.u32()? as usize;
    let descriptor = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::Format("descriptor is not UTF-8".into()))?;
    let (arch_text, precond_text) = descriptor
        .rsplit_once(" precond=")
        .ok_or_else(|| Error::Format(format!("descriptor {descriptor:?} lacks preconditioning")))?;
    let arch: Architecture = arch_text.parse()?;
    let precond: Preconditioning = precond_text.parse()?;
    let schedule_hash = r.u64()?;
    let n = r.count(4)?;
    if n != arch.param_count() {
        return Err(Error::Format(format!(
            "{n} parameters but the architecture needs {}",
            arch.param_count()
        )));
    }
    let params = (0..n)
        .map(|_| Ok(f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as f64))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let model = DenoiserModel::from_params(arch, precond, params)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(Checkpoint {
        model,
        schedule_hash,
    })
}

pub fn save_checkpoint(path: &Path, model: &DenoiserModel, schedule_hash: u64) -> Result<()> {
    fs::write(path, encode_checkpoint(model, schedule_hash))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

pub fn encode_optimizer(opt: &AdamW) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 16 * opt.m.len());
    out.extend_from_slice(OPT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let c = opt.config;
    for v in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&opt.step.to_le_bytes());
    out.extend_from_slice(&(opt.m.len() as u64).to_le_bytes());
    for v in opt.m.iter().chain(&opt.v) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_optimizer(bytes: &[u8]) -> Result<AdamW> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(OPT_MAGIC)?;
    let config = AdamWConfig {
        lr: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
        weight_decay: r.f64()?,
    };
    let step = r.u64()?;
    let n = r.count(16)?;
    let m = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let v = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(AdamW { config, step, m, v })
}

pub fn save_optimizer(path: &Path, opt: &AdamW) -> Result<()> {
    fs::write(path, encode_optimizer(opt))?;
    Ok(())
}

pub fn load_optimizer(path: &Path) -> Result<AdamW> {
    decode_optimizer(&fs::read(path)?)
}
