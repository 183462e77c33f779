//! Checkpoint files: a JSON header naming each parameter array (name, shape,
//! offset) followed by length-prefixed little-endian f64 payloads. The format
//! round-trips bit-exactly.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"ABCKPT01";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset of the array's length prefix within the payload section.
    offset: u64,
}

#[derive(Debug, Clone)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Writes atomically (temp file + rename).
pub fn save(path: &Path, meta: &serde_json::Value, arrays: &[NamedArray]) -> Result<()> {
    let mut payload: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(arrays.len());
    for a in arrays {
        if a.shape.iter().product::<usize>() != a.data.len() {
            return Err(Error::Checkpoint(format!(
                "array {}: shape {:?} does not match {} values",
                a.name,
                a.shape,
                a.data.len()
            )));
        }
        entries.push(ArrayEntry {
            name: a.name.clone(),
            shape: a.shape.clone(),
            offset: payload.len() as u64,
        });
        payload.extend_from_slice(&(a.data.len() as u64).to_le_bytes());
        for v in &a.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header =
        serde_json::to_vec(&Header { format_version: 1, meta: meta.clone(), arrays: entries })?;

    let mut bytes = Vec::with_capacity(MAGIC.len() + 8 + header.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);
    write_atomic(path, &bytes)
}

pub fn load(path: &Path) -> Result<(serde_json::Value, Vec<NamedArray>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() + 8 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16 + header_len;
    if bytes.len() < header_end {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
    let payload = &bytes[header_end..];

    let mut arrays = Vec::with_capacity(header.arrays.len());
    for e in header.arrays {
        let off = e.offset as usize;
        if payload.len() < off + 8 {
            return Err(Error::Checkpoint(format!("array {}: offset out of range", e.name)));
        }
        let count = u64::from_le_bytes(payload[off..off + 8].try_into().unwrap()) as usize;
        let start = off + 8;
        let end = start + count * 8;
        if payload.len() < end {
            return Err(Error::Checkpoint(format!("array {}: truncated payload", e.name)));
        }
        if e.shape.iter().product::<usize>() != count {
            return Err(Error::Checkpoint(format!(
                "array {}: shape {:?} vs {} stored values",
                e.name, e.shape, count
            )));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push(NamedArray { name: e.name, shape: e.shape, data });
    }
    Ok((header.meta, arrays))
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_digest(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Writes a file via a temp sibling and rename so partial writes never land.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        std::process::id()
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
