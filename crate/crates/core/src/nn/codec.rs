//! Checkpoint byte format.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "CODL"
//!      4     2  format version (u16, currently 1)
//!      6     8  architecture fingerprint (u64)
//!     14     8  step counter (u64)
//!     22     4  model id (u32)
//!     26     1  payload dtype (0 = f64, 1 = f32)
//!     27     8  parameter count (u64)
//!     35     -  parameters in canonical layout order
//! ```
//!
//! All integers and floats are little-endian.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Architecture, Parameters};
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CODL";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 35;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadDtype {
    #[default]
    F64,
    /// Reduced precision for teacher-only copies; values are rounded on encode.
    F32,
}

impl PayloadDtype {
    pub fn flag(self) -> u8 {
        match self {
            PayloadDtype::F64 => 0,
            PayloadDtype::F32 => 1,
        }
    }

    pub fn from_flag(flag: u8) -> Option<Self> {
        match flag {
            0 => Some(PayloadDtype::F64),
            1 => Some(PayloadDtype::F32),
            _ => None,
        }
    }

    pub fn bytes_per_value(self) -> usize {
        match self {
            PayloadDtype::F64 => 8,
            PayloadDtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub fingerprint: u64,
    pub step: u64,
    pub model_id: u32,
    pub dtype: PayloadDtype,
    pub param_count: u64,
}

impl Header {
    pub fn payload_len(&self) -> usize {
        self.param_count as usize * self.dtype.bytes_per_value()
    }
}

pub fn encode(params: &Parameters, step: u64, model_id: u32, dtype: PayloadDtype) -> Vec<u8> {
    let values = params.values();
    let mut buf = Vec::with_capacity(HEADER_LEN + values.len() * dtype.bytes_per_value());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&params.fingerprint().0.to_le_bytes());
    buf.extend_from_slice(&step.to_le_bytes());
    buf.extend_from_slice(&model_id.to_le_bytes());
    buf.push(dtype.flag());
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    match dtype {
        PayloadDtype::F64 => values.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        PayloadDtype::F32 => {
            values.iter().for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes()))
        }
    }
    buf
}

fn le<const N: usize>(bytes: &[u8], at: usize) -> [u8; N] {
    bytes[at..at + N].try_into().expect("header length checked")
}

pub fn decode_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::CorruptHeader(format!("{} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::CorruptHeader(format!("bad magic {:02x?}", &bytes[..4])));
    }
    let version = u16::from_le_bytes(le(bytes, 4));
    if version != FORMAT_VERSION {
        return Err(Error::CorruptHeader(format!("unsupported format version {version}")));
    }
    let flag = bytes[26];
    let dtype = PayloadDtype::from_flag(flag)
        .ok_or_else(|| Error::CorruptHeader(format!("unknown payload dtype flag {flag}")))?;
    Ok(Header {
        fingerprint: u64::from_le_bytes(le(bytes, 6)),
        step: u64::from_le_bytes(le(bytes, 14)),
        model_id: u32::from_le_bytes(le(bytes, 22)),
        dtype,
        param_count: u64::from_le_bytes(le(bytes, 27)),
    })
}

/// Decodes a checkpoint written for `arch`.
pub fn decode(bytes: &[u8], arch: &Arc<Architecture>) -> Result<(Header, Parameters)> {
    let header = decode_header(bytes)?;
    let expected = arch.fingerprint().0;
    if header.fingerprint != expected {
        return Err(Error::FingerprintMismatch { expected, found: header.fingerprint });
    }
    if header.param_count != arch.param_count() as u64 {
        return Err(Error::CorruptHeader(format!(
            "parameter count {} does not match architecture ({})",
            header.param_count,
            arch.param_count()
        )));
    }
    let payload = &bytes[HEADER_LEN..];
    let need = header.payload_len();
    if payload.len() < need {
        return Err(Error::TruncatedPayload { expected: need, found: payload.len() });
    }
    if payload.len() > need {
        return Err(Error::CorruptHeader(format!("{} trailing bytes", payload.len() - need)));
    }
    let values: Vec<f64> = match header.dtype {
        PayloadDtype::F64 => {
            payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        }
        PayloadDtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    };
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::CorruptHeader(format!("non-finite parameter at index {i}")));
    }
    Ok((header, Parameters::new(Arc::clone(arch), values)?))
}

/// Full-precision encoding with step 0 and model id 0.
pub fn serialize_params(params: &Parameters) -> Vec<u8> {
    encode(params, 0, 0, PayloadDtype::F64)
}

pub fn deserialize_params(bytes: &[u8], arch: &Arc<Architecture>) -> Result<Parameters> {
    decode(bytes, arch).map(|(_, p)| p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;

    fn arch() -> Arc<Architecture> {
        Arc::new(Architecture::classifier(3, vec![4], 2).unwrap())
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let a = arch();
        let p = init_params(Arc::clone(&a), 11);
        let q = deserialize_params(&serialize_params(&p), &a).unwrap();
        assert_eq!(
            p.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            q.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn header_layout() {
        let a = arch();
        let p = init_params(Arc::clone(&a), 1);
        let bytes = encode(&p, 42, 3, PayloadDtype::F32);
        assert_eq!(&bytes[..4], b"CODL");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u64::from_le_bytes(bytes[6..14].try_into().unwrap()), a.fingerprint().0);
        assert_eq!(u64::from_le_bytes(bytes[14..22].try_into().unwrap()), 42);
        assert_eq!(u32::from_le_bytes(bytes[22..26].try_into().unwrap()), 3);
        assert_eq!(bytes[26], 1);
        assert_eq!(u64::from_le_bytes(bytes[27..35].try_into().unwrap()), p.len() as u64);
        assert_eq!(bytes.len(), HEADER_LEN + 4 * p.len());
        let (h, q) = decode(&bytes, &a).unwrap();
        assert_eq!((h.step, h.model_id, h.dtype), (42, 3, PayloadDtype::F32));
        for (x, y) in p.values().iter().zip(q.values()) {
            assert_eq!(*y, f64::from(*x as f32));
        }
    }

    #[test]
    fn wrong_magic_is_corrupt_header() {
        let a = arch();
        let mut bytes = serialize_params(&init_params(Arc::clone(&a), 1));
        bytes[0] = b'X';
        assert!(matches!(deserialize_params(&bytes, &a), Err(Error::CorruptHeader(_))));
        assert!(matches!(deserialize_params(&bytes[..10], &a), Err(Error::CorruptHeader(_))));
    }

    #[test]
    fn other_architecture_is_fingerprint_mismatch() {
        let a = arch();
        let other = Arc::new(Architecture::classifier(3, vec![5], 2).unwrap());
        let bytes = serialize_params(&init_params(Arc::clone(&a), 1));
        assert!(matches!(
            deserialize_params(&bytes, &other),
            Err(Error::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn short_payload_is_truncation() {
        let a = arch();
        let bytes = serialize_params(&init_params(Arc::clone(&a), 1));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(deserialize_params(cut, &a), Err(Error::TruncatedPayload { .. })));
    }
}
