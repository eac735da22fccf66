//! On-disk kernel matrices.
//!
//! Layout (all little-endian):
//!
//! | field     | type                          |
//! |-----------|-------------------------------|
//! | magic     | `b"CNTK"`                     |
//! | version   | `u32`                         |
//! | n         | `u64`                         |
//! | kind      | `u8` tag                      |
//! | depth     | `u32`                         |
//! | entries   | `n * n` x `f64`, row-major    |
//! | meta len  | `u64`                         |
//! | metadata  | UTF-8 JSON                    |

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernel_matrix::{KernelKind, KernelMatrix, KernelMeta};

pub const MAGIC: &[u8; 4] = b"CNTK";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 1 + 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileMetadata {
    pub kind: KernelKind,
    pub filter_size: Option<usize>,
    pub input_checksum: String,
    /// Hex SHA-256 of the entry bytes exactly as stored.
    pub payload_sha256: String,
    /// Free-form creation parameters (dataset, preprocessing, config).
    #[serde(default)]
    pub params: serde_json::Value,
}

/// Raw little-endian bytes of the entries, row-major.
pub fn payload_bytes(k: &KernelMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(k.n() * k.n() * 8);
    for v in k.to_row_major() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_kernel(k: &KernelMatrix, params: serde_json::Value) -> Result<Vec<u8>> {
    let asym = k.asymmetry();
    if asym > 1e-12 * k.max_abs() {
        return Err(Error::InvalidArgument(format!("refusing to store a kernel asymmetric by {asym:e}")));
    }
    let payload = payload_bytes(k);
    let meta = FileMetadata {
        kind: k.meta().kind,
        filter_size: k.meta().filter_size,
        input_checksum: k.meta().input_checksum.clone(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        params,
    };
    let meta = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + 8 + meta.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(k.n() as u64).to_le_bytes());
    out.push(k.meta().kind.tag());
    out.extend_from_slice(&k.meta().depth.to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, len: usize, what: &str) -> Result<&'a [u8]> {
    let end = at
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("file truncated while reading {what}")))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

pub fn decode_kernel(bytes: &[u8]) -> Result<(KernelMatrix, FileMetadata)> {
    let mut at = 0;
    if take(bytes, &mut at, 4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let n = u64::from_le_bytes(take(bytes, &mut at, 8, "n")?.try_into().unwrap());
    let tag = take(bytes, &mut at, 1, "kind")?[0];
    let kind = KernelKind::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown kernel tag {tag}")))?;
    let depth = u32::from_le_bytes(take(bytes, &mut at, 4, "depth")?.try_into().unwrap());
    let n = usize::try_from(n).map_err(|_| Error::Format(format!("n = {n} does not fit in memory")))?;
    let len = n
        .checked_mul(n)
        .and_then(|m| m.checked_mul(8))
        .ok_or_else(|| Error::Format(format!("n = {n} overflows the payload size")))?;
    let payload = take(bytes, &mut at, len, "entries")?;
    let meta_len = u64::from_le_bytes(take(bytes, &mut at, 8, "metadata length")?.try_into().unwrap());
    let meta_len = usize::try_from(meta_len).map_err(|_| Error::Format("metadata too large".into()))?;
    let meta_bytes = take(bytes, &mut at, meta_len, "metadata")?;
    if at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - at)));
    }
    let meta: FileMetadata = serde_json::from_slice(meta_bytes)?;
    if meta.kind != kind {
        return Err(Error::Format("header and metadata disagree on the kernel kind".into()));
    }
    if hex::encode(Sha256::digest(payload)) != meta.payload_sha256 {
        return Err(Error::Format("payload checksum mismatch".into()));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let k = KernelMatrix::new(
        DMatrix::from_row_slice(n, n, &values),
        KernelMeta {
            kind,
            depth,
            filter_size: meta.filter_size,
            input_checksum: meta.input_checksum.clone(),
        },
    )?;
    Ok((k, meta))
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_kernel(path: &Path, k: &KernelMatrix, params: serde_json::Value) -> Result<()> {
    let bytes = encode_kernel(k, params)?;
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_kernel(path: &Path) -> Result<(KernelMatrix, FileMetadata)> {
    decode_kernel(&fs::read(path)?)
}
