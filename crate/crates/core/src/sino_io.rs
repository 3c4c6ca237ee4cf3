//! Sinogram binary files.
//!
//! Layout (all little-endian): `b"SINO"`, `u32` version, `u32` n_angles,
//! `u32` n_bins, then `n_angles * n_bins` `f32` values in angle-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::phantom::Sinogram;

pub const SINO_MAGIC: &[u8; 4] = b"SINO";
pub const SINO_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_sinogram(sino: &Sinogram) -> Vec<u8> {
    encode_state(sino.shape(), sino.values())
}

/// Same layout as a sinogram file, for raw sampler states that may hold
/// negative values.
pub fn encode_state((n_angles, n_bins): (usize, usize), values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * values.len());
    out.extend_from_slice(SINO_MAGIC);
    out.extend_from_slice(&SINO_VERSION.to_le_bytes());
    out.extend_from_slice(&(n_angles as u32).to_le_bytes());
    out.extend_from_slice(&(n_bins as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

pub fn decode_sinogram(bytes: &[u8]) -> Result<Sinogram> {
    let ((n_angles, n_bins), values) = decode_state(bytes)?;
    Sinogram::new(n_angles, n_bins, values)
}

/// Shape and values without the nonnegativity check.
pub fn decode_state(bytes: &[u8]) -> Result<((usize, usize), Vec<f64>)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "sinogram file too short ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[..4] != SINO_MAGIC {
        return Err(Error::Format("bad sinogram magic".into()));
    }
    let version = read_u32(bytes, 4);
    if version != SINO_VERSION {
        return Err(Error::Format(format!(
            "unsupported sinogram version {version}"
        )));
    }
    let n_angles = read_u32(bytes, 8) as usize;
    let n_bins = read_u32(bytes, 12) as usize;
    let expected = HEADER_LEN + 4 * n_angles * n_bins;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "sinogram payload is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect();
    Ok(((n_angles, n_bins), values))
}

pub fn write_sinogram(path: &Path, sino: &Sinogram) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_sinogram(sino))?;
    Ok(())
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram> {
    decode_sinogram(&fs::read(path)?)
}
