//! Checkpoint binary format "MBL1".
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "MBL1"
//! version  u32      currently 1
//! digest   u64      FNV-1a 64 over every byte after this field
//! count    u32      number of tensors
//! entry*   name_len u32, name bytes, tag u8, ndim u8, dims u32 each,
//!          offset u64 (element offset into payload), len u64
//! payload  f32 little-endian, tensors contiguous in name order
//! ```
//!
//! Entries are sorted ascending by name with non-overlapping, contiguous
//! offsets; both properties are validated on load. The digest covers header
//! entries and payload, so a single flipped byte anywhere is rejected.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tag, Tensor};

pub const MAGIC: [u8; 4] = *b"MBL1";
pub const VERSION: u32 = 1;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

pub fn encode_checkpoint(params: &ParamSet) -> Vec<u8> {
    // Body = everything the digest covers: count, entries, payload.
    let mut body: Vec<u8> = Vec::new();
    body.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let mut payload: Vec<u8> = Vec::new();
    let mut offset: u64 = 0;
    for (name, p) in params.iter() {
        body.extend_from_slice(&(name.len() as u32).to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.push(p.tag.code());
        body.push(p.tensor.shape().len() as u8);
        for &d in p.tensor.shape() {
            body.extend_from_slice(&(d as u32).to_le_bytes());
        }
        body.extend_from_slice(&offset.to_le_bytes());
        body.extend_from_slice(&(p.tensor.len() as u64).to_le_bytes());
        for &v in p.tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += p.tensor.len() as u64;
    }
    body.extend_from_slice(&payload);

    let mut out = Vec::with_capacity(16 + body.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&fnv1a64(&body).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Integrity("checkpoint truncated".to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Integrity("bad magic bytes".to_string()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let stored_digest = r.u64()?;
    let body = &bytes[r.pos..];
    if fnv1a64(body) != stored_digest {
        return Err(Error::Integrity("digest mismatch".to_string()));
    }

    let count = r.u32()? as usize;
    struct Entry {
        name: String,
        tag: Tag,
        shape: Vec<usize>,
        offset: u64,
        len: u64,
    }
    let mut entries = Vec::with_capacity(count);
    let mut running: u64 = 0;
    let mut prev_name: Option<String> = None;
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = core::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Integrity("tensor name is not UTF-8".to_string()))?
            .to_string();
        if let Some(prev) = &prev_name {
            if *prev >= name {
                return Err(Error::Integrity("tensor names not ascending".to_string()));
            }
        }
        let tag = Tag::from_code(r.u8()?)
            .map_err(|_| Error::Integrity("unknown tag code".to_string()))?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let offset = r.u64()?;
        let len = r.u64()?;
        if offset != running {
            return Err(Error::Integrity(alloc::format!(
                "tensor `{name}` offset {offset} overlaps or leaves a gap (expected {running})"
            )));
        }
        if shape.iter().product::<usize>() as u64 != len {
            return Err(Error::Integrity(alloc::format!(
                "tensor `{name}` length disagrees with its shape"
            )));
        }
        running += len;
        prev_name = Some(name.clone());
        entries.push(Entry {
            name,
            tag,
            shape,
            offset,
            len,
        });
    }

    let payload_start = r.pos;
    let expected_bytes = running as usize * 4;
    if bytes.len() - payload_start != expected_bytes {
        return Err(Error::Integrity("payload size mismatch".to_string()));
    }
    let mut params = ParamSet::new();
    for e in entries {
        let start = payload_start + (e.offset as usize) * 4;
        let end = start + (e.len as usize) * 4;
        let data: Vec<f32> = bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(&e.name, e.tag, Tensor::new(e.shape, data)?);
    }
    Ok(params)
}
