//! Binary tensor files.
//!
//! Layout (all little-endian, no padding):
//!
//! | bytes        | content                     |
//! |--------------|-----------------------------|
//! | 4            | magic `HOT1`                |
//! | 4            | `u32` order k               |
//! | 8·k          | `u64` dims                  |
//! | 8·∏dims      | `f64` payload, row-major    |

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::IoError;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"HOT1";

pub fn encode_tensor(t: &Tensor<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.order() + 8 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.order() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f64>, IoError> {
    let mut cursor = bytes;
    let mut take = |n: usize, what: &str| -> Result<&[u8], IoError> {
        if cursor.len() < n {
            return Err(IoError::MalformedHeader(format!("missing {what}")));
        }
        let (head, rest) = cursor.split_at(n);
        cursor = rest;
        Ok(head)
    };
    if take(4, "magic")? != MAGIC {
        return Err(IoError::MalformedHeader("bad magic".into()));
    }
    let order = u32::from_le_bytes(take(4, "order")?.try_into().unwrap()) as usize;
    if order == 0 {
        return Err(IoError::MalformedHeader("order 0".into()));
    }
    let mut dims = Vec::with_capacity(order.min(64));
    for _ in 0..order {
        let d = u64::from_le_bytes(take(8, "dimension")?.try_into().unwrap());
        let d = usize::try_from(d)
            .map_err(|_| IoError::MalformedHeader(format!("dimension {d} exceeds usize")))?;
        dims.push(d);
    }
    let shape = Shape::new(dims)?;
    let expected = (shape.numel() as u64)
        .checked_mul(8)
        .ok_or_else(|| IoError::MalformedHeader("payload size overflows".into()))?;
    let found = cursor.len() as u64;
    if found < expected {
        return Err(IoError::TruncatedPayload { expected, found });
    }
    if found > expected {
        return Err(IoError::TrailingBytes(found - expected));
    }
    let data = cursor
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::from_vec(shape.dims().to_vec(), data)?)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor<f64>) -> Result<(), IoError> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f64>, IoError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_tensor(&bytes)
}
