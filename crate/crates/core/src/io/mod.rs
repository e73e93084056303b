//! On-disk formats: dataset manifests, images, float sidecars, synthetic data
//! generation and checkpoints.

mod checkpoint;
mod dataset;
mod sidecar;
mod synthetic;

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::Raster;

pub use checkpoint::{
    decode_container, encode_container, load_checkpoint, save_checkpoint, Checkpoint, RngSnapshot, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use dataset::{
    load_dataset, load_object, DatasetIndex, FrameEntry, ObjectEntry, ObjectManifest, DATASET_INDEX, MANIFEST_NAME,
};
pub use sidecar::{decode_sidecar, encode_sidecar, read_sidecar, write_sidecar, SIDECAR_MAGIC};
pub use synthetic::{
    generate_synthetic, object_id, sphere_cameras, synthetic_datasets, synthetic_objects, Primitive, PrimitiveKind,
    SyntheticScene, SyntheticSpec,
};

/// Writes via a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// 8-bit RGB PNG, values clamped to `[0, 1]` and rounded.
pub fn encode_png(image: &Raster) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, bytes)
        .ok_or_else(|| Error::shape("PNG buffer size"))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::contract(format!("PNG encoding failed: {e}")))?;
    Ok(out.into_inner())
}

pub fn write_png(path: &Path, image: &Raster) -> Result<()> {
    write_atomic(path, &encode_png(image)?)
}

pub fn read_png(path: &Path) -> Result<Raster> {
    let bytes = read_bytes(path)?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, "png", e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Raster::new(w as usize, h as usize, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let img = Raster::from_fn(5, 3, |x, y| [x as f64 / 4.0, y as f64 / 2.0, 0.5]);
        let path = dir.path().join("a.png");
        write_png(&path, &img).unwrap();
        let back = read_png(&path).unwrap();
        assert!(back.same_dims(&img));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn garbage_png_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"not a png").unwrap();
        assert!(matches!(read_png(&path), Err(Error::Format { .. })));
        assert!(matches!(
            read_png(&dir.path().join("missing.png")),
            Err(Error::Io { .. })
        ));
    }
}
