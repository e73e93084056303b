//! Float image sidecar: 8-byte magic, `u32` width and height (little-endian),
//! then planar R, G, B planes of little-endian `f32`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::Raster;

use super::{read_bytes, write_atomic};

pub const SIDECAR_MAGIC: [u8; 8] = *b"HPF32RGB";

const HEADER: usize = 16;

pub fn encode_sidecar(image: &Raster) -> Vec<u8> {
    let (w, h) = (image.width(), image.height());
    let mut out = Vec::with_capacity(HEADER + 12 * w * h);
    out.extend_from_slice(&SIDECAR_MAGIC);
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    for ch in 0..3 {
        for px in image.data().chunks_exact(3) {
            out.extend_from_slice(&(px[ch] as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_sidecar(bytes: &[u8], path: &Path) -> Result<Raster> {
    if bytes.len() < HEADER || bytes[..8] != SIDECAR_MAGIC {
        return Err(Error::format(path, "magic", "not a float image sidecar"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (w, h) = (word(8), word(12));
    let plane = w * h;
    if bytes.len() != HEADER + 12 * plane {
        return Err(Error::format(
            path,
            "length",
            format!(
                "{w}x{h} sidecar needs {} bytes, found {}",
                HEADER + 12 * plane,
                bytes.len()
            ),
        ));
    }
    let value = |i: usize| {
        let at = HEADER + 4 * i;
        f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64
    };
    let mut data = vec![0.0; 3 * plane];
    for ch in 0..3 {
        for p in 0..plane {
            data[3 * p + ch] = value(ch * plane + p);
        }
    }
    Raster::new(w, h, data)
}

pub fn write_sidecar(path: &Path, image: &Raster) -> Result<()> {
    write_atomic(path, &encode_sidecar(image))
}

pub fn read_sidecar(path: &Path) -> Result<Raster> {
    decode_sidecar(&read_bytes(path)?, path)
}
