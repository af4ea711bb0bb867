//! Binary adapter file format (`.kmrg`).
//!
//! Layout, all little-endian, no padding:
//!
//! | bytes         | content                                   |
//! |---------------|-------------------------------------------|
//! | 4             | magic `KMRG`                              |
//! | 2             | version (u16) = 1                         |
//! | 4             | header length `h` (u32)                   |
//! | h             | UTF-8 JSON header                         |
//! | per layer     | A (`rank*d_in` f32), then B (`d_out*rank` f32) |
//!
//! Layers appear in header order, which is sorted by layer then projection.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{FactorPair, LayerKey, LoraAdapter, Projection};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"KMRG";
pub const FORMAT_VERSION: u16 = 1;
/// Magic + version + header length.
pub const PREAMBLE_BYTES: usize = 4 + 2 + 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeaderLayer {
    pub layer: u32,
    pub proj: Projection,
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub task_id: String,
    pub problem_type: String,
    pub language: String,
    pub rank: usize,
    pub scale_numerator: f64,
    pub layers: Vec<HeaderLayer>,
}

impl Header {
    pub fn for_adapter(adapter: &LoraAdapter) -> Self {
        Header {
            task_id: adapter.task_id.clone(),
            problem_type: adapter.problem_type.clone(),
            language: adapter.language.clone(),
            rank: adapter.rank(),
            scale_numerator: adapter.scale_numerator(),
            layers: adapter
                .layers()
                .iter()
                .map(|(k, p)| HeaderLayer {
                    layer: k.layer,
                    proj: k.projection,
                    d_in: p.d_in(),
                    d_out: p.d_out(),
                })
                .collect(),
        }
    }

    /// Number of f32 values in the tensor payload.
    pub fn payload_values(&self) -> usize {
        self.layers
            .iter()
            .map(|l| self.rank * (l.d_in + l.d_out))
            .sum()
    }
}

/// Exact encoded size of an adapter with this header.
pub fn encoded_len(header: &Header) -> Result<usize> {
    let json = serde_json::to_vec(header)?;
    Ok(PREAMBLE_BYTES + json.len() + 4 * header.payload_values())
}

pub fn encode_adapter(adapter: &LoraAdapter) -> Result<Vec<u8>> {
    let header = Header::for_adapter(adapter);
    let json = serde_json::to_vec(&header)?;
    let header_len = u32::try_from(json.len())
        .map_err(|_| Error::Shape("adapter header exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(PREAMBLE_BYTES + json.len() + 4 * header.payload_values());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for pair in adapter.layers().values() {
        for v in pair.a().iter().chain(pair.b()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated: {what} needs {n} bytes, {remaining} remain"),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(count * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

pub fn decode_adapter(bytes: &[u8]) -> Result<LoraAdapter> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(format_err(0, format!("bad magic {magic:02x?}, expected `KMRG`")));
    }
    let version = cur.take(2, "version")?;
    let version = u16::from_le_bytes([version[0], version[1]]);
    if version != FORMAT_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let len = cur.take(4, "header length")?;
    let header_len = u32::from_le_bytes([len[0], len[1], len[2], len[3]]) as usize;
    let header_start = cur.pos;
    let json = cur.take(header_len, "header")?;
    let header: Header = serde_json::from_slice(json)
        .map_err(|e| format_err(header_start, format!("invalid header json: {e}")))?;

    let mut previous: Option<LayerKey> = None;
    let mut layers = BTreeMap::new();
    for entry in &header.layers {
        let key = LayerKey::new(entry.layer, entry.proj);
        if previous.is_some_and(|p| p >= key) {
            return Err(format_err(
                header_start,
                format!("header layers not strictly sorted at {key}"),
            ));
        }
        previous = Some(key);
        let a_offset = cur.pos;
        let a = cur.f32s(header.rank * entry.d_in, &format!("tensor A of {key}"))?;
        let b = cur.f32s(entry.d_out * header.rank, &format!("tensor B of {key}"))?;
        let pair = FactorPair::new(header.rank, entry.d_in, entry.d_out, a, b)
            .map_err(|e| format_err(a_offset, format!("{key}: {e}")))?;
        layers.insert(key, pair);
    }
    if cur.pos != bytes.len() {
        return Err(format_err(
            cur.pos,
            format!(
                "{} trailing bytes after the last tensor declared by the header",
                bytes.len() - cur.pos
            ),
        ));
    }
    LoraAdapter::new(
        header.task_id,
        header.problem_type,
        header.language,
        header.rank,
        header.scale_numerator,
        layers,
    )
    .map_err(|e| format_err(header_start, e.to_string()))
}

/// Writes atomically: a sibling temp file is renamed over `path`.
pub fn write_adapter(adapter: &LoraAdapter, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_adapter(adapter)?;
    write_atomic(path, &bytes)
}

pub fn read_adapter(path: impl AsRef<Path>) -> Result<LoraAdapter> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_adapter(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
