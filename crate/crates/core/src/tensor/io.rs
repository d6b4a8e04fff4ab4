//! Binary tensor files.
//!
//! Layout: magic `CTN1`, one dtype byte (0 = f32, 1 = f64), one axis-count
//! byte (always 5), five little-endian `u64` dims, then the payload in
//! little-endian row-major order with the last axis fastest.

use std::fs;
use std::path::Path;

use super::{Dims, Tensor5};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"CTN1";
const HEADER_LEN: usize = 4 + 1 + 1 + 5 * 8;

/// A decoded tensor of either storage precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor5<f32>),
    F64(Tensor5<f64>),
}

impl AnyTensor {
    pub fn dims(&self) -> Dims {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
        }
    }

    pub fn to_precision<S: Scalar>(&self) -> Tensor5<S> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode<S: Scalar>(t: &Tensor5<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + t.data().len() * S::BYTES);
    out.extend_from_slice(MAGIC);
    out.push(S::DTYPE);
    out.push(5);
    for d in t.dims().to_array() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected CTN1".into()));
    }
    let dtype = bytes[4];
    if bytes[5] != 5 {
        return Err(Error::Format(format!("expected 5 axes, found {}", bytes[5])));
    }
    let mut dims = [0usize; 5];
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 6 + i * 8;
        let v = u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"));
        *d = usize::try_from(v).map_err(|_| Error::Format(format!("dim {v} too large")))?;
    }
    let dims = Dims::from_array(dims);
    let payload = &bytes[HEADER_LEN..];
    match dtype {
        0 => decode_payload::<f32>(dims, payload).map(AnyTensor::F32),
        1 => decode_payload::<f64>(dims, payload).map(AnyTensor::F64),
        other => Err(Error::Format(format!("unknown dtype byte {other}"))),
    }
}

fn decode_payload<S: Scalar>(dims: Dims, payload: &[u8]) -> Result<Tensor5<S>> {
    let expected = dims.numel().checked_mul(S::BYTES);
    if expected != Some(payload.len()) {
        return Err(Error::Format(format!(
            "payload of {} bytes does not match dims {dims}",
            payload.len()
        )));
    }
    let data = payload.chunks_exact(S::BYTES).map(S::read_le).collect();
    Tensor5::from_vec(dims, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_tensor<S: Scalar>(path: impl AsRef<Path>, t: &Tensor5<S>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    decode(&fs::read(path)?)
}
