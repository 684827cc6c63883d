//! `ULMA1` checkpoint files.
//!
//! Layout: the five magic bytes, a UTF-8 JSON header, then every tensor as
//! little-endian `f32` in manifest order. Manifest offsets are relative to
//! the first byte after the header.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DecayGroup, Depth, EncoderConfig, ModelParameters};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"ULMA1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: Option<DecayGroup>,
    pub depth: Option<Depth>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    group: Option<DecayGroup>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    depth: Option<Depth>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    tensors: Vec<ManifestEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Tensors plus the encoder config and free-form run metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub tensors: Vec<NamedTensor>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(config: EncoderConfig) -> Self {
        Checkpoint {
            config,
            tensors: Vec::new(),
            meta: serde_json::Value::Null,
        }
    }

    /// Append every tensor of `params`, names prefixed with `prefix`.
    pub fn push_params(&mut self, prefix: &str, params: &ModelParameters) {
        for (info, data) in params.tensors() {
            self.tensors.push(NamedTensor {
                name: format!("{prefix}{}", info.name),
                shape: info.shape,
                group: Some(info.group),
                depth: Some(info.depth),
                data: data.to_vec(),
            });
        }
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.iter().any(|t| t.name.starts_with(prefix))
    }

    /// Rebuild parameters stored under `prefix`; every tensor must be present with the expected shape.
    pub fn params(&self, prefix: &str) -> Result<ModelParameters> {
        let by_name: HashMap<&str, &NamedTensor> =
            self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut params = ModelParameters::zeros(&self.config);
        for (info, data) in params.tensors_mut() {
            let name = format!("{prefix}{}", info.name);
            let tensor = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if tensor.shape != info.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, config expects {:?}",
                    tensor.shape, info.shape
                )));
            }
            data.copy_from_slice(&tensor.data);
        }
        Ok(params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut manifest = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Checkpoint(format!("tensor {} data does not match its shape", t.name)));
            }
            manifest.push(ManifestEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset,
                group: t.group,
                depth: t.depth,
            });
            offset += t.data.len() * 4;
        }
        let header = Header {
            config: self.config.clone(),
            tensors: manifest,
            meta: self.meta.clone(),
        };
        let mut out = MAGIC.to_vec();
        serde_json::to_writer(&mut out, &header)?;
        out.reserve(offset);
        for t in &self.tensors {
            for &x in &t.data {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = bytes
            .strip_prefix(MAGIC.as_slice())
            .ok_or_else(|| Error::Checkpoint("not a ULMA1 checkpoint (bad magic bytes)".into()))?;
        let mut stream = serde_json::Deserializer::from_slice(body).into_iter::<Header>();
        let header = match stream.next() {
            Some(Ok(h)) => h,
            Some(Err(e)) => return Err(Error::Checkpoint(format!("unreadable header: {e}"))),
            None => return Err(Error::Checkpoint("missing header".into())),
        };
        let data = &body[stream.byte_offset()..];
        let mut expected_offset = 0;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            if entry.offset != expected_offset {
                return Err(Error::Checkpoint(format!(
                    "tensor {} at offset {}, expected {expected_offset}",
                    entry.name, entry.offset
                )));
            }
            let len = entry.shape.iter().product::<usize>();
            let end = entry.offset + len * 4;
            let raw = data.get(entry.offset..end).ok_or_else(|| {
                Error::Checkpoint(format!("tensor {} extends past end of file", entry.name))
            })?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            expected_offset = end;
            tensors.push(NamedTensor {
                name: entry.name,
                shape: entry.shape,
                group: entry.group,
                depth: entry.depth,
                data: values,
            });
        }
        if expected_offset != data.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last tensor",
                data.len() - expected_offset
            )));
        }
        header.config.validate()?;
        Ok(Checkpoint {
            config: header.config,
            tensors,
            meta: header.meta,
        })
    }

    /// Write to a sibling temp file and rename, so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Replace `path` with `bytes` via write-to-temp and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
