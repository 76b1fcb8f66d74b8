//! Binary container shared by model checkpoints and adversarial-set payloads.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ADVF"            4 bytes
//! version           u32
//! header length     u32, then that many bytes of UTF-8 JSON
//! tensor count      u32
//! per tensor:
//!   name length     u32, then the UTF-8 name
//!   rank            u32
//!   extents         u32 x rank
//!   payload         f32 x product(extents)
//! ```
//!
//! Trailing bytes after the last tensor are rejected.

use crate::error::CheckpointError;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"ADVF";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(header: &serde_json::Value, tensors: &[(&str, &Tensor)]) -> Vec<u8> {
    let header = serde_json::to_vec(header).expect("JSON values always serialize");
    let payload: usize = tensors
        .iter()
        .map(|(n, t)| 12 + n.len() + 4 * (t.shape().len() + t.len()))
        .sum();
    let mut out = Vec::with_capacity(16 + header.len() + payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, header.len());
    out.extend_from_slice(&header);
    put_u32(&mut out, tensors.len());
    for (name, t) in tensors {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(serde_json::Value, Vec<(String, Tensor)>), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("length checked");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = r.u32()? as usize;
    let header: serde_json::Value = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| CheckpointError::Malformed(format!("tensor name: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| {
                CheckpointError::Malformed(format!("tensor {name}: extents overflow"))
            })?;
        let raw = r.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        let t = Tensor::new(&shape, data)
            .map_err(|e| CheckpointError::Malformed(format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((header, tensors))
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("extent fits in u32");
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n - available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("length checked"),
        ))
    }
}
