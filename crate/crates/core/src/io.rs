//! Binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GMLT" | version u8 = 1 | dtype u8 = 1 (f32) | ndim u8 = 5
//!        | dims u32 x 5 (B, C, T, H, W) | payload f32 x numel, W fastest
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dims5, FeatureMap, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"GMLT";
pub const TENSOR_VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;

/// Header plus payload for a rank-5 f32 tensor.
pub fn encode_tensor(t: &FeatureMap<f32>) -> Result<Vec<u8>> {
    let d = t.dims5()?;
    let mut buf = Vec::with_capacity(4 + 3 + 20 + 4 * t.numel());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&[TENSOR_VERSION, DTYPE_F32, 5]);
    for dim in d.as_vec() {
        let dim = u32::try_from(dim).map_err(|_| Error::dim("encode_tensor", format!("dim {dim} exceeds u32")))?;
        buf.extend_from_slice(&dim.to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<FeatureMap<f32>> {
    let truncated = |detail: String| Error::Truncated {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 4 || &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "GMLT",
        });
    }
    if bytes.len() < 7 {
        return Err(truncated(format!("header needs 7 bytes, file has {}", bytes.len())));
    }
    let (version, dtype, ndim) = (bytes[4], bytes[5], bytes[6]);
    let unsupported = |what, found: u8| Error::Unsupported {
        path: path.to_path_buf(),
        what,
        found: found as u64,
    };
    if version != TENSOR_VERSION {
        return Err(unsupported("version", version));
    }
    if dtype != DTYPE_F32 {
        return Err(unsupported("dtype", dtype));
    }
    if ndim != 5 {
        return Err(unsupported("ndim", ndim));
    }
    let header = 7 + 4 * 5;
    if bytes.len() < header {
        return Err(truncated(format!("dims need {header} bytes, file has {}", bytes.len())));
    }
    let mut dims = [0usize; 5];
    for (i, d) in dims.iter_mut().enumerate() {
        let raw = u32::from_le_bytes(bytes[7 + 4 * i..11 + 4 * i].try_into().expect("4 bytes"));
        *d = raw as usize;
    }
    let overflow = || Error::DimOverflow {
        path: path.to_path_buf(),
        detail: format!("dims {dims:?}"),
    };
    if dims.contains(&0) {
        return Err(overflow());
    }
    let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(overflow)?;
    let payload = numel.checked_mul(4).ok_or_else(overflow)?;
    let expected = header.checked_add(payload).ok_or_else(overflow)?;
    if bytes.len() < expected {
        return Err(truncated(format!("expected {expected} bytes, file has {}", bytes.len())));
    }
    if bytes.len() > expected {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            detail: format!("{} trailing bytes", bytes.len() - expected),
        });
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let [b, c, t, h, w] = dims;
    Tensor::feature_map(Dims5::new(b, c, t, h, w), data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &FeatureMap<f32>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(t)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<FeatureMap<f32>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}
