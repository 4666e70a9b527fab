//! SMAP1 raw score maps and 16-bit PGM previews.
//!
//! SMAP1 layout (little-endian): `"SMAP1" | u32 H | u32 W | f32[H*W]`.

use std::fs;
use std::path::Path;

use super::ScoreMap;
use crate::error::{Error, Result};

pub const SMAP_MAGIC: &[u8; 5] = b"SMAP1";
const HEADER_LEN: usize = 5 + 8;

pub fn encode_score_map(map: &ScoreMap) -> Result<Vec<u8>> {
    let dim = |v: usize| u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} exceeds u32")));
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * map.values.len());
    out.extend_from_slice(SMAP_MAGIC);
    out.extend_from_slice(&dim(map.height)?.to_le_bytes());
    out.extend_from_slice(&dim(map.width)?.to_le_bytes());
    for &v in &map.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_score_map(bytes: &[u8]) -> Result<ScoreMap> {
    if bytes.len() < 5 || &bytes[..5] != SMAP_MAGIC {
        return Err(Error::Format("bad magic, not an SMAP1 file".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated("SMAP1 header".into()));
    }
    let h = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as u64;
    let w = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")) as u64;
    let n = h
        .checked_mul(w)
        .filter(|&n| n <= 1 << 32)
        .ok_or_else(|| Error::Format(format!("dimension overflow: {h}x{w}")))? as usize;
    if bytes.len() != HEADER_LEN + 4 * n {
        return Err(Error::Truncated(format!(
            "header declares {} bytes, payload has {}",
            HEADER_LEN + 4 * n,
            bytes.len()
        )));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
        .collect();
    ScoreMap::new(h as usize, w as usize, values)
}

pub fn write_score_map(map: &ScoreMap, path: &Path) -> Result<()> {
    fs::write(path, encode_score_map(map)?)?;
    Ok(())
}

pub fn read_score_map(path: &Path) -> Result<ScoreMap> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    decode_score_map(&bytes)
}

/// Binary 16-bit PGM (P5, big-endian samples), min-max normalized per map.
pub fn to_pgm16(map: &ScoreMap) -> Vec<u8> {
    let lo = map.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{} {}\n65535\n", map.width, map.height).into_bytes();
    for &v in &map.values {
        let q = if span > 0.0 { ((v - lo) / span * 65535.0).round() as u16 } else { 0 };
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn write_pgm16(map: &ScoreMap, path: &Path) -> Result<()> {
    fs::write(path, to_pgm16(map))?;
    Ok(())
}
