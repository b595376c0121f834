//! Binary checkpoint container.
//!
//! ```text
//! "UCAP" | u32 version | u64 payload_len | payload | u32 crc32(payload)
//! payload = u32 config_len | config (UTF-8 key=value lines)
//!         | u32 block_count | block*
//! block   = u32 name_len | name | u8 rank | u32 dim * rank | f32 * prod(dims)
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"UCAP";
pub const FORMAT_VERSION: u32 = 1;

const HEADER_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Block {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "block {name}: shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if shape.len() > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!("block {name}: rank {} too large", shape.len())));
        }
        Ok(Block { name, shape, data })
    }

    pub fn from_array(name: impl Into<String>, a: &ArrayD<f32>) -> Self {
        Block {
            name: name.into(),
            shape: a.shape().to_vec(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> ArrayD<f32> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data.clone()).expect("block shape checked at construction")
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config: String,
    pub blocks: Vec<Block>,
}

impl Checkpoint {
    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        put_u32(&mut payload, self.config.len() as u32);
        payload.extend_from_slice(self.config.as_bytes());
        put_u32(&mut payload, self.blocks.len() as u32);
        for b in &self.blocks {
            put_u32(&mut payload, b.name.len() as u32);
            payload.extend_from_slice(b.name.as_bytes());
            payload.push(b.shape.len() as u8);
            for &d in &b.shape {
                put_u32(&mut payload, d as u32);
            }
            payload.reserve(b.data.len() * 4);
            for v in &b.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + 4);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        let crc = crc32fast::hash(&payload);
        out.extend_from_slice(&payload);
        put_u32(&mut out, crc);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated("missing magic".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let len = r.u64("payload length")?;
        let len = usize::try_from(len).map_err(|_| Error::Truncated("payload length overflows".into()))?;
        let payload = r.take(len, "payload")?;
        let stored = r.u32("checksum")?;
        if r.pos != bytes.len() {
            return Err(Error::parse("checkpoint", format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        parse_payload(payload)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("partial");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn parse_payload(payload: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes: payload, pos: 0 };
    let config_len = r.u32("config length")? as usize;
    let config = std::str::from_utf8(r.take(config_len, "config")?)
        .map_err(|e| Error::parse("checkpoint config", e.to_string()))?
        .to_string();
    let count = r.u32("block count")? as usize;
    let mut blocks = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u32("block name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "block name")?)
            .map_err(|e| Error::parse("block name", e.to_string()))?
            .to_string();
        let rank = r.take(1, "block rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut n: usize = 1;
        for _ in 0..rank {
            let d = r.u32("block dim")? as usize;
            n = n
                .checked_mul(d)
                .ok_or_else(|| Error::parse("block shape", format!("{name}: element count overflows")))?;
            shape.push(d);
        }
        let bytes_needed = n
            .checked_mul(4)
            .ok_or_else(|| Error::parse("block shape", format!("{name}: byte count overflows")))?;
        let raw = r.take(bytes_needed, "block data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if blocks.iter().any(|b: &Block| b.name == name) {
            return Err(Error::parse("checkpoint", format!("duplicate block {name}")));
        }
        blocks.push(Block { name, shape, data });
    }
    if r.pos != payload.len() {
        return Err(Error::parse("checkpoint", "payload has unread bytes".to_string()));
    }
    Ok(Checkpoint { config, blocks })
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated(format!("{what}: need {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}
