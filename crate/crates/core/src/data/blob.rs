//! `NFPD` patch blobs: little-endian header (magic, version, count, height,
//! width) followed by fixed-size records (camera, iso, scene as u32, then
//! the clean and noisy u8 planes).

use std::fs;
use std::path::Path;

use super::NoisePatchRecord;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NFPD";
pub const VERSION: u32 = 1;
const HEADER: usize = 20;

pub fn encode(records: &[NoisePatchRecord], height: usize, width: usize) -> Result<Vec<u8>> {
    let plane = 3 * height * width;
    let mut out = Vec::with_capacity(HEADER + records.len() * (12 + 2 * plane));
    out.extend_from_slice(MAGIC);
    for v in [VERSION, records.len() as u32, height as u32, width as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for r in records {
        r.validate()?;
        if r.height != height || r.width != width {
            return Err(Error::Data(format!(
                "record {}x{} in a {height}x{width} blob",
                r.height, r.width
            )));
        }
        for v in [r.camera, r.iso, r.scene] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&r.clean);
        out.extend_from_slice(&r.noisy);
    }
    Ok(out)
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().expect("4 bytes"))
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NoisePatchRecord>> {
    let bad = |m: &str| Error::Data(format!("patch blob: {m}"));
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u32_at(bytes, 8) as usize;
    let (height, width) = (u32_at(bytes, 12) as usize, u32_at(bytes, 16) as usize);
    let plane = 3 * height * width;
    let rec = 12 + 2 * plane;
    if bytes.len() != HEADER + count * rec {
        return Err(bad(&format!(
            "length {} does not match {count} records of {height}x{width}",
            bytes.len()
        )));
    }
    (0..count)
        .map(|i| {
            let o = HEADER + i * rec;
            NoisePatchRecord::new(
                u32_at(bytes, o),
                u32_at(bytes, o + 4),
                u32_at(bytes, o + 8),
                height,
                width,
                bytes[o + 12..o + 12 + plane].to_vec(),
                bytes[o + 12 + plane..o + rec].to_vec(),
            )
        })
        .collect()
}

pub fn write(path: &Path, records: &[NoisePatchRecord], height: usize, width: usize) -> Result<()> {
    fs::write(path, encode(records, height, width)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<NoisePatchRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes)
}
