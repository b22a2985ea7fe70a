//! Hidden-feature token files: a fixed binary container for `[tokens, dim]`
//! f32 matrices computed by an external feature extractor. Layout (little
//! endian): magic `GSFT`, u32 version, u32 token count, u32 dim, then
//! `tokens * dim` f32 values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GSFT";
const VERSION: u32 = 1;
/// Upper bound on declared element count, so a corrupt header cannot force
/// a huge allocation.
const MAX_ELEMS: usize = 1 << 24;

pub fn save_feature_file<T: Scalar>(tokens: &Tensor<T>, path: &Path) -> Result<()> {
    let shape = tokens.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!(
            "feature tokens must be [tokens, dim], got {shape:?}"
        )));
    }
    let mut buf = Vec::with_capacity(16 + tokens.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(shape[0] as u32).to_le_bytes());
    buf.extend_from_slice(&(shape[1] as u32).to_le_bytes());
    for v in tokens.data() {
        buf.extend_from_slice(&(v.widen() as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_feature_file<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path)?;
    // Magic is checked before any size field is even read.
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a feature token file (bad magic)".into()));
    }
    if bytes.len() < 16 {
        return Err(Error::Format("feature file header truncated".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::Format(format!(
            "feature file version {version}, this build reads {VERSION}"
        )));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let elems = rows
        .checked_mul(cols)
        .filter(|&n| n > 0 && n <= MAX_ELEMS)
        .ok_or_else(|| Error::Format(format!("implausible token shape {rows}x{cols}")))?;
    let body = &bytes[16..];
    if body.len() != elems * 4 {
        return Err(Error::Format(format!(
            "feature file declares {rows}x{cols} ({} bytes) but carries {}",
            elems * 4,
            body.len()
        )));
    }
    let data: Vec<T> = body
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    let t = Tensor::from_vec(&[rows, cols], data)?;
    t.ensure_finite("feature file")?;
    Ok(t)
}
