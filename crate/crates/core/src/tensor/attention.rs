//! Scaled dot-product cross-attention built from tape primitives.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::num::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    /// Token width of both query and key/value streams.
    pub d_model: usize,
    /// Number of attention heads; `d_model` must divide evenly.
    pub heads: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig { d_model: 32, heads: 1 }
    }
}

/// Cross-attention where queries come from the per-primitive stream `f_i`
/// `[N,d]` and keys/values from the payload token stream `f_h` `[T,d]`:
///
/// `softmax(Q K^T / sqrt(d_head)) V`, softmax over the key axis.
///
/// Returns the `[N,d]` attention readout (before any residual/output
/// projection — the injector owns those).
pub fn cross_attention<T: Scalar>(
    tape: &mut Tape<T>,
    f_i: Var,
    f_h: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    cfg: &AttentionConfig,
) -> Result<Var> {
    if cfg.heads == 0 || cfg.d_model % cfg.heads != 0 {
        return Err(Error::Validation(format!(
            "attention d_model {} must be divisible by heads {}",
            cfg.d_model, cfg.heads
        )));
    }
    let check_proj = |name: &str, s: &[usize]| -> Result<()> {
        if s != [cfg.d_model, cfg.d_model] {
            return Err(Error::Shape(format!(
                "attention projection {name} must be [{d},{d}], got {s:?}",
                d = cfg.d_model
            )));
        }
        Ok(())
    };
    check_proj("w_q", tape.value(w_q).shape())?;
    check_proj("w_k", tape.value(w_k).shape())?;
    check_proj("w_v", tape.value(w_v).shape())?;
    if tape.value(f_i).shape().len() != 2
        || tape.value(f_i).shape()[1] != cfg.d_model
        || tape.value(f_h).shape().len() != 2
        || tape.value(f_h).shape()[1] != cfg.d_model
    {
        return Err(Error::Shape(format!(
            "attention streams must be [*,{}]: f_i {:?}, f_h {:?}",
            cfg.d_model,
            tape.value(f_i).shape(),
            tape.value(f_h).shape()
        )));
    }

    let q = tape.matmul(f_i, w_q)?;
    let k = tape.matmul(f_h, w_k)?;
    let v = tape.matmul(f_h, w_v)?;
    let d_head = cfg.d_model / cfg.heads;
    let inv_sqrt = T::of(1.0 / (d_head as f64).sqrt());

    let mut head_outs = Vec::with_capacity(cfg.heads);
    for hd in 0..cfg.heads {
        let (qh, kh, vh) = if cfg.heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, hd * d_head, d_head)?,
                tape.slice_cols(k, hd * d_head, d_head)?,
                tape.slice_cols(v, hd * d_head, d_head)?,
            )
        };
        let logits = tape.matmul_nt(qh, kh)?;
        let scaled = tape.scale(logits, inv_sqrt)?;
        let weights = tape.softmax(scaled)?;
        head_outs.push(tape.matmul(weights, vh)?);
    }
    let mut out = head_outs[0];
    for &h in &head_outs[1..] {
        out = tape.concat(out, h, 1)?;
    }
    Ok(out)
}
