//! Image-plane features: a 3-D point is projected into every fixed posed
//! image, and the normalized projection plus the bilinearly interpolated color
//! at that spot form a 5-slot block per plane.

use nalgebra::{Matrix3, Vector3};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{Camera, Point3};
use crate::raster::Raster;

/// Slots contributed by each plane: normalized `(x, y)` then RGB.
pub const SLOTS_PER_PLANE: usize = 5;

/// A fixed, posed RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    pub view_id: usize,
    pub pixels: Raster,
    pub camera: Camera,
}

impl ImagePlane {
    pub fn new(view_id: usize, pixels: Raster, camera: Camera) -> Result<Self> {
        if pixels.width() != camera.width() || pixels.height() != camera.height() {
            return Err(Error::contract(format!(
                "view {view_id}: image {}x{} does not match camera {}x{}",
                pixels.width(),
                pixels.height(),
                camera.width(),
                camera.height()
            )));
        }
        if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract(format!("view {view_id}: pixel values outside [0, 1]")));
        }
        Ok(ImagePlane {
            view_id,
            pixels,
            camera,
        })
    }

    pub fn view_direction(&self) -> Vector3<f64> {
        self.camera.view_direction()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Continuous pixel coordinates.
    pub uv: (f64, f64),
    /// `uv` mapped to `[−1, 1]²`.
    pub xy: (f64, f64),
    pub valid: bool,
}

pub fn project_point(x: &Point3, plane: &ImagePlane) -> Projection {
    let pc = plane.camera.world_to_camera(x);
    project_camera_space(&pc, &plane.camera)
}

fn project_camera_space(pc: &Point3, cam: &Camera) -> Projection {
    if pc.z >= 0.0 {
        return Projection {
            uv: (0.0, 0.0),
            xy: (0.0, 0.0),
            valid: false,
        };
    }
    let (u, v) = cam.camera_to_pixel(pc);
    let (w, h) = (cam.width() as f64, cam.height() as f64);
    let valid = (0.0..=w).contains(&u) && (0.0..=h).contains(&v);
    Projection {
        uv: (u, v),
        xy: (2.0 * u / w - 1.0, 2.0 * v / h - 1.0),
        valid,
    }
}

/// Bilinear blend of the four pixel centers around `uv`. `uv` must lie in
/// `[0.5, W − 0.5] × [0.5, H − 0.5]`.
pub fn bilinear_sample(image: &Raster, uv: (f64, f64)) -> Result<[f64; 3]> {
    let (w, h) = (image.width(), image.height());
    let (u, v) = uv;
    let in_domain = (0.5..=w as f64 - 0.5).contains(&u) && (0.5..=h as f64 - 0.5).contains(&v);
    if !in_domain {
        return Err(Error::contract(format!(
            "bilinear sample at ({u}, {v}) outside the {w}x{h} sampling domain"
        )));
    }
    let px = u - 0.5;
    let py = v - 0.5;
    let x0 = (px.floor() as usize).min(w - 1);
    let y0 = (py.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = px - x0 as f64;
    let fy = py - y0 as f64;
    let (a, b, c, d) = (
        image.pixel(x0, y0),
        image.pixel(x1, y0),
        image.pixel(x0, y1),
        image.pixel(x1, y1),
    );
    let mut out = [0.0; 3];
    for ch in 0..3 {
        let top = a[ch] * (1.0 - fx) + b[ch] * fx;
        let bottom = c[ch] * (1.0 - fx) + d[ch] * fx;
        out[ch] = top * (1.0 - fy) + bottom * fy;
    }
    Ok(out)
}

fn clamp_to_domain(uv: (f64, f64), image: &Raster) -> (f64, f64) {
    (
        uv.0.clamp(0.5, image.width() as f64 - 0.5),
        uv.1.clamp(0.5, image.height() as f64 - 0.5),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneFeatures {
    /// `5n` values: per plane, normalized `(x, y)` then RGB.
    pub z: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Writes one plane's 5 slots into `out`; returns validity.
fn plane_slots(pc: &Point3, plane: &ImagePlane, out: &mut [f64]) -> Result<bool> {
    let p = project_camera_space(pc, &plane.camera);
    if !p.valid {
        out.fill(0.0);
        return Ok(false);
    }
    let rgb = bilinear_sample(&plane.pixels, clamp_to_domain(p.uv, &plane.pixels))?;
    out[0] = p.xy.0;
    out[1] = p.xy.1;
    out[2..5].copy_from_slice(&rgb);
    Ok(true)
}

pub fn assemble_features(x: &Point3, planes: &[ImagePlane]) -> Result<PlaneFeatures> {
    if planes.is_empty() {
        return Err(Error::contract("feature assembly needs at least one plane"));
    }
    let mut z = vec![0.0; SLOTS_PER_PLANE * planes.len()];
    let mut mask = Vec::with_capacity(planes.len());
    for (plane, slots) in planes.iter().zip(z.chunks_exact_mut(SLOTS_PER_PLANE)) {
        let pc = plane.camera.world_to_camera(x);
        mask.push(plane_slots(&pc, plane, slots)?);
    }
    Ok(PlaneFeatures { z, mask })
}

/// Width of a feature row for `n` planes.
pub fn feature_width(n_planes: usize, with_mask: bool) -> usize {
    n_planes * SLOTS_PER_PLANE + if with_mask { n_planes } else { 0 }
}

/// Batched assembly into a `[points, 5n (+ n)]` tensor. With `with_mask`, the
/// n validity bits (as 0/1) follow the 5n feature slots.
pub fn feature_matrix(points: &[Point3], planes: &[ImagePlane], with_mask: bool) -> Result<Tensor> {
    if planes.is_empty() {
        return Err(Error::contract("feature assembly needs at least one plane"));
    }
    let n = planes.len();
    let width = feature_width(n, with_mask);
    let frames: Vec<(Matrix3<f64>, Point3)> = planes
        .iter()
        .map(|p| (p.camera.rotation().transpose(), p.camera.origin()))
        .collect();
    let mut data = vec![0.0; points.len() * width];
    for (x, row) in points.iter().zip(data.chunks_exact_mut(width)) {
        for (j, (plane, (rt, origin))) in planes.iter().zip(&frames).enumerate() {
            let pc = rt * (x - origin);
            let slots = &mut row[j * SLOTS_PER_PLANE..(j + 1) * SLOTS_PER_PLANE];
            let valid = plane_slots(&pc, plane, slots)?;
            if with_mask && valid {
                row[n * SLOTS_PER_PLANE + j] = 1.0;
            }
        }
    }
    Tensor::new(vec![points.len(), width], data)
}
