//! MSEG1 binary scene container.
//!
//! Little-endian layout:
//!
//! ```text
//! "MSEG1" | u8 version | u32 H | u32 W | u32 C_in | u32 K | f32[C_in*H*W] | u8[H*W]
//! ```
//!
//! Features are channel-major, row-major within a channel.

use std::fs;
use std::path::Path;

use super::{LabelMap, Scene};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MSEG_MAGIC: &[u8; 5] = b"MSEG1";
pub const MSEG_VERSION: u8 = 1;
const HEADER_LEN: usize = 5 + 1 + 4 * 4;
/// Upper bound on the element count a header may declare.
const MAX_ELEMENTS: u64 = 1 << 32;

pub fn encode_scene(scene: &Scene) -> Result<Vec<u8>> {
    let (c, h, w) = (scene.channels(), scene.height(), scene.width());
    if scene.features.shape() != [c, h, w] {
        return Err(Error::Shape(format!(
            "features {:?} vs labels {h}x{w}",
            scene.features.shape()
        )));
    }
    let dim = |v: usize| u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} exceeds u32")));
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * c * h * w + h * w);
    out.extend_from_slice(MSEG_MAGIC);
    out.push(MSEG_VERSION);
    for v in [h, w, c, scene.classes] {
        out.extend_from_slice(&dim(v)?.to_le_bytes());
    }
    for &v in scene.features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.extend_from_slice(&scene.labels.codes);
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode_scene(bytes: &[u8]) -> Result<Scene> {
    if bytes.len() < MSEG_MAGIC.len() || &bytes[..5] != MSEG_MAGIC {
        return Err(Error::Format("bad magic, not an MSEG1 file".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated(format!("header needs {HEADER_LEN} bytes, have {}", bytes.len())));
    }
    if bytes[5] != MSEG_VERSION {
        return Err(Error::Version {
            expected: u32::from(MSEG_VERSION),
            found: u32::from(bytes[5]),
        });
    }
    let h = read_u32(bytes, 6) as u64;
    let w = read_u32(bytes, 10) as u64;
    let c = read_u32(bytes, 14) as u64;
    let k = read_u32(bytes, 18) as usize;
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Format("zero dimension in header".into()));
    }
    let pixels = h.checked_mul(w).filter(|&p| p <= MAX_ELEMENTS);
    let elements = pixels.and_then(|p| p.checked_mul(c)).filter(|&e| e <= MAX_ELEMENTS);
    let (pixels, elements) = match (pixels, elements) {
        (Some(p), Some(e)) => (p as usize, e as usize),
        _ => return Err(Error::Format(format!("dimension overflow: {c}x{h}x{w}"))),
    };
    let expected = HEADER_LEN + 4 * elements + pixels;
    if bytes.len() != expected {
        return Err(Error::Truncated(format!(
            "header declares {expected} bytes, payload has {}",
            bytes.len()
        )));
    }
    let feat_bytes = &bytes[HEADER_LEN..HEADER_LEN + 4 * elements];
    let data: Vec<f64> = feat_bytes
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite feature value".into()));
    }
    let labels = LabelMap {
        height: h as usize,
        width: w as usize,
        codes: bytes[HEADER_LEN + 4 * elements..].to_vec(),
    };
    labels.validate(k)?;
    Ok(Scene {
        features: Tensor::new(&[c as usize, h as usize, w as usize], data)?,
        labels,
        classes: k,
        seed: None,
    })
}

pub fn write_scene(scene: &Scene, path: &Path) -> Result<()> {
    fs::write(path, encode_scene(scene)?)?;
    Ok(())
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    decode_scene(&bytes)
}
