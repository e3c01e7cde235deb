//! Versioned binary container shared by checkpoints, EK-FAC bases and
//! influence shards.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes   "IFPC"
//! version    u32
//! header_len u64       byte length of the JSON header
//! header     JSON      UTF-8, kind-specific
//! count      u64       number of f64 values
//! payload    f64 * count
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"IFPC";
pub const VERSION: u32 = 1;

pub fn encode<H: Serialize>(header: &H, payload: &[f64]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(24 + header.len() + payload.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, Vec<f64>)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let header_len = cur.u64()? as usize;
    let header: H = serde_json::from_slice(cur.take(header_len)?)?;
    let count = cur.u64()? as usize;
    let raw = cur.take(count.checked_mul(8).ok_or_else(|| Error::Format("payload size overflow".into()))?)?;
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    let payload = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, payload))
}

pub fn write_file<H: Serialize>(path: &Path, header: &H, payload: &[f64]) -> Result<String> {
    let bytes = encode(header, payload)?;
    write_bytes(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_file<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[derive(serde::Serialize, serde::Deserialize, PartialEq, Debug)]
    struct Header {
        kind: String,
        n: usize,
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(payload in proptest::collection::vec(any::<f64>(), 0..64)) {
            let h = Header { kind: "t".into(), n: payload.len() };
            let bytes = encode(&h, &payload).unwrap();
            let (h2, p2): (Header, Vec<f64>) = decode(&bytes).unwrap();
            prop_assert_eq!(h, h2);
            let a: Vec<u64> = payload.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = p2.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let bytes = encode(&Header { kind: "x".into(), n: 2 }, &[1.0, 2.0]).unwrap();
        assert!(decode::<Header>(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode::<Header>(&bad), Err(Error::Format(_))));
    }
}
