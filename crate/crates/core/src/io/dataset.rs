//! Posed multi-view datasets.
//!
//! ```text
//! root/dataset.json            near, far, background, object list with splits
//! root/<object>/transforms.json  camera_angle_x, frames[{file_path, transform_matrix}]
//! root/<object>/<file_path>    PNG, plus an optional `.f32` sidecar next to it
//! ```
//!
//! A root that directly contains `transforms.json` is read as a single object.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{orthonormality_error, Camera};
use crate::meta::{Split, Task, TaskDataset};
use crate::par::{self, ExecPolicy};
use crate::planes::ImagePlane;
use crate::raster::Raster;
use crate::render::WHITE;

use super::{read_bytes, read_png, read_sidecar};

pub const DATASET_INDEX: &str = "dataset.json";
pub const MANIFEST_NAME: &str = "transforms.json";

/// Largest rotation defect repaired on load.
const POSE_REPAIR_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub file_path: String,
    pub transform_matrix: [[f64; 4]; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectManifest {
    pub camera_angle_x: f64,
    pub frames: Vec<FrameEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub id: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
    pub resolution: [usize; 2],
    pub objects: Vec<ObjectEntry>,
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| {
        let field = format!("line {} column {}", e.line(), e.column());
        Error::format(path, field, e.to_string())
    })
}

/// Snaps a nearly orthonormal rotation to the closest rotation.
fn repair_pose(m: &[[f64; 4]; 4], path: &Path, frame: usize) -> Result<Matrix4<f64>> {
    let field = format!("frames[{frame}].transform_matrix");
    let c2w = Matrix4::from_fn(|r, c| m[r][c]);
    if !c2w.iter().all(|v| v.is_finite()) {
        return Err(Error::format(path, field, format!("view {frame}: non-finite pose")));
    }
    let bottom = [m[3][0], m[3][1], m[3][2], m[3][3]];
    if bottom
        .iter()
        .zip([0.0, 0.0, 0.0, 1.0])
        .any(|(a, b)| (a - b).abs() > POSE_REPAIR_TOL)
    {
        return Err(Error::format(
            path,
            field,
            format!("view {frame}: bottom row is not [0,0,0,1]"),
        ));
    }
    let r: Matrix3<f64> = c2w.fixed_view::<3, 3>(0, 0).into_owned();
    let err = orthonormality_error(&r);
    if err > POSE_REPAIR_TOL || r.determinant() <= 0.0 {
        return Err(Error::format(
            path,
            field,
            format!("view {frame}: rotation is not orthonormal (error {err:.2e})"),
        ));
    }
    let svd = r.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let fixed = u * vt;
    let mut out = Matrix4::identity();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&fixed);
    out.fixed_view_mut::<3, 1>(0, 3)
        .copy_from(&c2w.fixed_view::<3, 1>(0, 3));
    Ok(out)
}

fn image_paths(dir: &Path, file_path: &str) -> (PathBuf, PathBuf) {
    let mut png = dir.join(file_path);
    if png.extension().is_none() {
        png.set_extension("png");
    }
    let sidecar = png.with_extension("f32");
    (png, sidecar)
}

/// Prefers the float sidecar when present.
fn load_view_image(dir: &Path, file_path: &str) -> Result<Raster> {
    let (png, sidecar) = image_paths(dir, file_path);
    if sidecar.exists() {
        read_sidecar(&sidecar)
    } else {
        read_png(&png)
    }
}

/// Reads one object directory into a task.
pub fn load_object(dir: &Path, object_id: &str, near: f64, far: f64, background: [f64; 3]) -> Result<Task> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let manifest: ObjectManifest = parse_json(&manifest_path)?;
    if !(manifest.camera_angle_x > 0.0 && manifest.camera_angle_x < std::f64::consts::PI) {
        return Err(Error::format(
            &manifest_path,
            "camera_angle_x",
            format!("must lie in (0, π), got {}", manifest.camera_angle_x),
        ));
    }
    let mut views = Vec::with_capacity(manifest.frames.len());
    let mut resolution = None;
    for (i, frame) in manifest.frames.iter().enumerate() {
        let pixels = load_view_image(dir, &frame.file_path)?;
        let dims = (pixels.width(), pixels.height());
        if *resolution.get_or_insert(dims) != dims {
            return Err(Error::format(
                &manifest_path,
                format!("frames[{i}].file_path"),
                format!("view {i} is {}x{}, other views differ", dims.0, dims.1),
            ));
        }
        if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::format(
                &manifest_path,
                format!("frames[{i}].file_path"),
                format!("view {i} has values outside [0, 1]"),
            ));
        }
        let c2w = repair_pose(&frame.transform_matrix, &manifest_path, i)?;
        let focal = Camera::focal_from_fov(manifest.camera_angle_x, dims.0);
        let camera = Camera::new(c2w, focal, dims.0, dims.1)
            .map_err(|e| Error::format(&manifest_path, format!("frames[{i}].transform_matrix"), e.to_string()))?;
        views.push(ImagePlane::new(i, pixels, camera)?);
    }
    Task::from_views(object_id, views, near, far, background)
        .map_err(|e| Error::format(&manifest_path, "frames", e.to_string()))
}

/// Loads every object of `split`, in index order.
pub fn load_dataset(root: &Path, split: Split, policy: ExecPolicy) -> Result<TaskDataset> {
    let index_path = root.join(DATASET_INDEX);
    if !index_path.exists() && root.join(MANIFEST_NAME).exists() {
        let id = root
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "object".into());
        let task = load_object(root, &id, 2.0, 6.0, WHITE)?;
        return Ok(TaskDataset {
            tasks: vec![task],
            split,
            seed: 0,
        });
    }
    let index: DatasetIndex = parse_json(&index_path)?;
    if !(0.0 < index.near && index.near < index.far) {
        return Err(Error::format(&index_path, "near", "need 0 < near < far"));
    }
    let entries: Vec<&ObjectEntry> = index.objects.iter().filter(|o| o.split == split).collect();
    let tasks = par::try_map(policy, &entries, |o| {
        load_object(&root.join(&o.id), &o.id, index.near, index.far, index.background)
    })?;
    Ok(TaskDataset { tasks, split, seed: 0 })
}
