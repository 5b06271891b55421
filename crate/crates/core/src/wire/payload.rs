use crate::ckks::{deserialize_ct, serialize_ct, Ciphertext, CkksContext};
use crate::nn::Tensor;
use crate::par;

use super::WireError;

pub const TENSOR_DTYPE_F64: u8 = 1;

/// Shapes must fit the codec: at most 255 dims, each and their product within u32.
pub fn check_dims(shape: &[usize]) -> Result<(), WireError> {
    if shape.len() > u8::MAX as usize {
        return Err(WireError::Codec(format!("{} dimensions exceed the u8 rank field", shape.len())));
    }
    let mut total: u64 = 1;
    for &d in shape {
        if d > u32::MAX as usize {
            return Err(WireError::Codec(format!("dimension {d} exceeds u32")));
        }
        total = total.saturating_mul(d as u64);
    }
    if total > u32::MAX as u64 {
        return Err(WireError::Codec(format!("shape {shape:?} has more than 2^32-1 elements")));
    }
    Ok(())
}

/// `dtype u8 | ndim u8 | dims u32 LE | f64 LE data`.
pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>, WireError> {
    check_dims(t.shape())?;
    let mut out = Vec::with_capacity(2 + 4 * t.ndim() + 8 * t.len());
    out.push(TENSOR_DTYPE_F64);
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decodes one tensor from the front of `bytes` and returns the remainder.
pub fn decode_tensor_prefix(bytes: &[u8]) -> Result<(Tensor, &[u8]), WireError> {
    let short = || WireError::Codec("tensor payload truncated".into());
    let (&dtype, rest) = bytes.split_first().ok_or_else(short)?;
    if dtype != TENSOR_DTYPE_F64 {
        return Err(WireError::Codec(format!("unsupported tensor dtype {dtype}")));
    }
    let (&ndim, mut rest) = rest.split_first().ok_or_else(short)?;
    let mut shape = Vec::with_capacity(ndim as usize);
    for _ in 0..ndim {
        if rest.len() < 4 {
            return Err(short());
        }
        shape.push(u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize);
        rest = &rest[4..];
    }
    let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(short)?;
    let need = count.checked_mul(8).ok_or_else(short)?;
    if rest.len() < need {
        return Err(short());
    }
    let data = rest[..need].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let t = Tensor::new(shape, data).map_err(|e| WireError::Codec(e.to_string()))?;
    Ok((t, &rest[need..]))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, WireError> {
    let (t, rest) = decode_tensor_prefix(bytes)?;
    if !rest.is_empty() {
        return Err(WireError::Codec(format!("{} trailing bytes after tensor", rest.len())));
    }
    Ok(t)
}

/// `count u32 | per ciphertext: len u32, serialized ciphertext`.
pub fn encode_ct_batch(cts: &[Ciphertext]) -> Vec<u8> {
    let parts = par::map_slice(cts, serialize_ct);
    let total: usize = parts.iter().map(|p| 4 + p.len()).sum();
    let mut out = Vec::with_capacity(4 + total);
    out.extend_from_slice(&(cts.len() as u32).to_le_bytes());
    for p in parts {
        out.extend_from_slice(&(p.len() as u32).to_le_bytes());
        out.extend_from_slice(&p);
    }
    out
}

pub fn decode_ct_batch(bytes: &[u8], ctx: &CkksContext) -> Result<Vec<Ciphertext>, WireError> {
    let short = || WireError::Codec("ciphertext batch truncated".into());
    if bytes.len() < 4 {
        return Err(short());
    }
    let count = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let mut spans = Vec::with_capacity(count.min(1 << 16));
    let mut pos = 4;
    for _ in 0..count {
        let len_bytes = bytes.get(pos..pos + 4).ok_or_else(short)?;
        let len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        pos += 4;
        let end = pos.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(short)?;
        spans.push((pos, end));
        pos = end;
    }
    if pos != bytes.len() {
        return Err(WireError::Codec(format!("{} trailing bytes after ciphertext batch", bytes.len() - pos)));
    }
    par::map_slice(&spans, |&(s, e)| deserialize_ct(&bytes[s..e], ctx))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| WireError::Codec(e.to_string()))
}

/// `GRAD_AL` body: `∂J/∂a^(L)` and, only in the leaky debug or prior-protocol
/// variant, the weight gradient as a second tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradPayload {
    pub grad_al: Tensor,
    pub grad_w: Option<Tensor>,
}

impl GradPayload {
    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        let mut out = encode_tensor(&self.grad_al)?;
        if let Some(w) = &self.grad_w {
            out.extend_from_slice(&encode_tensor(w)?);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let (grad_al, rest) = decode_tensor_prefix(bytes)?;
        let grad_w = if rest.is_empty() { None } else { Some(decode_tensor(rest)?) };
        Ok(Self { grad_al, grad_w })
    }
}

/// `EPOCH_END` body: finished epoch index and the number of forward-only
/// evaluation batches that follow.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochEnd {
    pub epoch: u32,
    pub eval_batches: u32,
}

impl EpochEnd {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.epoch.to_le_bytes().to_vec();
        out.extend_from_slice(&self.eval_batches.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        if bytes.len() != 8 {
            return Err(WireError::Codec(format!("EPOCH_END payload is {} bytes, expected 8", bytes.len())));
        }
        Ok(Self {
            epoch: u32::from_le_bytes(bytes[..4].try_into().unwrap()),
            eval_batches: u32::from_le_bytes(bytes[4..].try_into().unwrap()),
        })
    }
}
