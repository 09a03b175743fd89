//! Self-describing binary container used for every checkpoint kind.
//!
//! Layout: magic bytes, a little-endian `u32` header length, a JSON header
//! (free-form `meta` plus a tensor table), then the tensor payloads as
//! little-endian `f64` in row-major order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};

pub const VQVAE_MAGIC: &[u8] = b"VQV1";
pub const BASE_MAGIC: &[u8] = b"BASE1";
pub const LORA_MAGIC: &[u8] = b"LORA1";
pub const EXTRACTOR_MAGIC: &[u8] = b"BIE1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Mat)>,
}

impl Container {
    pub fn new(meta: serde_json::Value, tensors: Vec<(String, Mat)>) -> Self {
        Self { meta, tensors }
    }

    pub fn to_bytes(&self, magic: &[u8]) -> Vec<u8> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, m)| TensorEntry {
                    name: name.clone(),
                    rows: m.nrows(),
                    cols: m.ncols(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(magic.len() + 4 + header.len());
        out.extend_from_slice(magic);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, m) in &self.tensors {
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], magic: &[u8]) -> Result<Self> {
        if bytes.len() < magic.len() + 4 || &bytes[..magic.len()] != magic {
            return Err(Error::Format(format!(
                "expected magic {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let mut pos = magic.len();
        let hlen = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as usize;
        pos += 4;
        let hbytes = bytes
            .get(pos..pos + hlen)
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(hbytes).map_err(|e| Error::Format(format!("bad header: {e}")))?;
        pos += hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n = entry.rows * entry.cols;
            let raw = bytes
                .get(pos..pos + 8 * n)
                .ok_or_else(|| Error::Format(format!("truncated tensor {}", entry.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            pos += 8 * n;
            let m = Mat::from_shape_vec((entry.rows, entry.cols), data).map_err(|e| Error::Format(e.to_string()))?;
            tensors.push((entry.name, m));
        }
        if pos != bytes.len() {
            return Err(Error::Format("trailing bytes after tensors".into()));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path, magic: &[u8]) -> Result<()> {
        write_atomic(path, &self.to_bytes(magic))
    }

    pub fn load(path: &Path, magic: &[u8]) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, magic).map_err(|e| match e {
            Error::Format(m) => Error::data(path, m),
            other => other,
        })
    }

    pub fn meta_as<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .cloned()
            .ok_or_else(|| Error::Format(format!("missing meta field {key}")))?;
        serde_json::from_value(v).map_err(|e| Error::Format(format!("meta field {key}: {e}")))
    }
}

/// Write to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = temp_sibling(path);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn temp_sibling(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    path.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}
