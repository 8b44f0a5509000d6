//! Bit-exact on-disk formats.
//!
//! **TSR v1** stores one tensor: an ASCII header line
//! `TSR 1 <rank> <dim0> <dim1> ...\n` followed by the elements as raw
//! little-endian `f32` in row-major order.
//!
//! **Named-tensor container** stores a set of named tensors plus a JSON
//! metadata document (architecture config, flavor, ...):
//!
//! ```text
//! NTC1\n
//! <u64 LE: header length>
//! <header JSON: {"kind": .., "meta": .., "tensors": [{"name": .., "dims": [..]}, ..]}>
//! <raw little-endian f32 data of every tensor, in header order>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TSR_MAGIC: &str = "TSR";
const TSR_VERSION: &str = "1";
const NTC_MAGIC: &[u8] = b"NTC1\n";

pub fn encode_tsr(t: &Tensor<f32>) -> Vec<u8> {
    let mut header = format!("{TSR_MAGIC} {TSR_VERSION} {}", t.shape().len());
    for d in t.shape() {
        header.push(' ');
        header.push_str(&d.to_string());
    }
    header.push('\n');
    let mut out = header.into_bytes();
    out.reserve(t.len() * 4);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tsr(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or("missing header line")?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| "header is not ASCII")?;
    let mut fields = header.split(' ');
    if fields.next() != Some(TSR_MAGIC) {
        return Err("bad magic".into());
    }
    if fields.next() != Some(TSR_VERSION) {
        return Err("unsupported version".into());
    }
    let rank: usize = fields.next().and_then(|r| r.parse().ok()).ok_or("bad rank")?;
    let dims: Vec<usize> = fields.map(|d| d.parse::<usize>()).collect::<std::result::Result<_, _>>().map_err(|_| "bad dimension")?;
    if dims.len() != rank {
        return Err(format!("rank {rank} but {} dimensions", dims.len()));
    }
    let n: usize = dims.iter().product();
    let body = &bytes[nl + 1..];
    if body.len() != n * 4 {
        return Err(format!("expected {} data bytes, found {}", n * 4, body.len()));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(dims, data).map_err(|e| e.to_string())
}

/// Writes `bytes` to a sibling temp file and renames it over `path`, so
/// readers observe either the old content or the complete new content.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = dir.join(format!(".tmp-{}-{name}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_tsr(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &encode_tsr(t))
}

pub fn read_tsr(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tsr(&bytes).map_err(|r| Error::format(path, r))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Serialize, Deserialize)]
struct ContainerHeader {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dims: Vec<usize>,
}

/// A named-tensor container held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Container {
    pub fn encode(&self) -> Vec<u8> {
        let header = ContainerHeader {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry { name: name.clone(), dims: t.shape().to_vec() })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = NTC_MAGIC.to_vec();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |r: &str| Error::format(origin, r.to_string());
        let rest = bytes.strip_prefix(NTC_MAGIC).ok_or_else(|| bad("bad magic"))?;
        if rest.len() < 8 {
            return Err(bad("truncated header length"));
        }
        let hlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let rest = &rest[8..];
        if rest.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: ContainerHeader =
            serde_json::from_slice(&rest[..hlen]).map_err(|e| Error::format(origin, e.to_string()))?;
        let mut body = &rest[hlen..];
        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            let n: usize = entry.dims.iter().product();
            if body.len() < n * 4 {
                return Err(bad(&format!("tensor {} truncated", entry.name)));
            }
            let data = body[..n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            body = &body[n * 4..];
            tensors.insert(entry.name, Tensor::new(entry.dims, data)?);
        }
        if !body.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Container { kind: header.kind, meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

/// Lists the entries of `dir` sorted by name, skipping temp artifacts.
pub fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        if name.to_string_lossy().starts_with(".tmp") {
            continue;
        }
        out.push(entry.path());
    }
    out.sort();
    Ok(out)
}
