//! Binary encoder checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "DLEM" | version u32 | layer count u32
//! per layer: in u32 | out u32 | flags u32 | weights f32 (row-major) | bias f32
//! CRC32 u32 of every preceding byte
//! ```
//!
//! Flag bit 0 marks standardization, bit 1 the rectifier.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::encoder::{AffineLayer, MlpEncoder};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"DLEM";
pub const FORMAT_VERSION: u32 = 1;

const FLAG_STANDARDIZE: u32 = 1;
const FLAG_RECTIFY: u32 = 2;

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn dim_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("dimension {v} exceeds u32")))
}

/// Serializes `encoder`, rounding parameters to `f32`.
pub fn encode<T: Scalar>(encoder: &MlpEncoder<T>) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(16 + 4 * encoder.parameter_count() + 12 * encoder.num_layers());
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, FORMAT_VERSION);
    push_u32(&mut buf, dim_u32(encoder.num_layers())?);
    for layer in encoder.layers() {
        push_u32(&mut buf, dim_u32(layer.in_dim())?);
        push_u32(&mut buf, dim_u32(layer.out_dim())?);
        let flags = if layer.standardize { FLAG_STANDARDIZE } else { 0 }
            | if layer.rectify { FLAG_RECTIFY } else { 0 };
        push_u32(&mut buf, flags);
        for &w in layer.weights.iter() {
            buf.extend_from_slice(&w.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
        for &b in layer.bias.iter() {
            buf.extend_from_slice(&b.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    push_u32(&mut buf, crc);
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::CorruptCheckpoint("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

/// Parses a checkpoint, checking magic, version, and CRC in that order.
pub fn decode(bytes: &[u8]) -> Result<MlpEncoder<f32>> {
    if bytes.len() < 16 {
        return Err(Error::CorruptCheckpoint(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(Error::CorruptCheckpoint(format!(
            "CRC mismatch (stored {stored:08x}, computed {actual:08x})"
        )));
    }

    let mut cur = Cursor { bytes: payload, pos: 8 };
    let count = cur.u32()? as usize;
    if count == 0 {
        return Err(Error::CorruptCheckpoint("zero layers".into()));
    }
    let mut layers = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let fan_in = cur.u32()? as usize;
        let fan_out = cur.u32()? as usize;
        let flags = cur.u32()?;
        if flags & !(FLAG_STANDARDIZE | FLAG_RECTIFY) != 0 {
            return Err(Error::CorruptCheckpoint(format!("layer {i}: unknown flags {flags:#x}")));
        }
        let size = fan_in
            .checked_mul(fan_out)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("layer {i}: size overflow")))?;
        let weights = Array2::from_shape_vec((fan_in, fan_out), cur.f32s(size)?)
            .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let bias = Array1::from(cur.f32s(fan_out)?);
        let layer = AffineLayer::new(
            weights,
            bias,
            flags & FLAG_STANDARDIZE != 0,
            flags & FLAG_RECTIFY != 0,
        )
        .map_err(|e| Error::CorruptCheckpoint(format!("layer {i}: {e}")))?;
        layers.push(layer);
    }
    if cur.pos != payload.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes",
            payload.len() - cur.pos
        )));
    }
    MlpEncoder::from_layers(layers).map_err(|e| Error::CorruptCheckpoint(e.to_string()))
}

pub fn save_checkpoint<T: Scalar>(encoder: &MlpEncoder<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(encoder)?)?;
    Ok(())
}

/// Loads a checkpoint and converts its `f32` parameters to `T`.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<MlpEncoder<T>> {
    Ok(decode(&fs::read(path)?)?.cast())
}
