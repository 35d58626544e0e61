// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary tensor envelope: magic `ASCDW1`, a little-endian `u64` header
//! length, a JSON header `{config, tensors: [{name, shape}]}`, then raw
//! little-endian `f32` payloads in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Weights};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 6] = b"ASCDW1";
/// Refuse headers larger than this; a corrupt length would otherwise
/// trigger a huge allocation.
const MAX_HEADER: u64 = 64 << 20;

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

/// Named tensors plus an arbitrary JSON config.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn write_envelope<W: Write>(mut w: W, config: &serde_json::Value, tensors: &[(String, &Tensor)]) -> Result<()> {
    let header = Header {
        config: config.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let bytes = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(&bytes)?;
    for (_, t) in tensors {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_envelope<R: Read>(mut r: R) -> Result<Envelope> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated file: missing magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic, not an ASCDW1 file".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| Error::Format("truncated header length".into()))?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER {
        return Err(Error::Format(format!("header length {len} too large")));
    }
    let mut header = vec![0u8; len as usize];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&header).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format(format!("truncated payload for {}", entry.name)))?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok(Envelope {
        config: header.config,
        tensors,
    })
}

impl Weights {
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let config = serde_json::to_value(&self.config)?;
        write_envelope(w, &config, &self.named_tensors())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut env = read_envelope(r)?;
        let config: ModelConfig =
            serde_json::from_value(env.config).map_err(|e| Error::Format(format!("bad model config: {e}")))?;
        Self::from_named(config, &mut env.tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
        Self::read_from(BufReader::new(file))
    }
}
