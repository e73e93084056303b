//! Synthetic task distribution: one constant-density primitive per object,
//! alternating spheres and axis-aligned boxes, rendered from cameras spread
//! over a sphere around the origin.

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Point3, Ray};
use crate::meta::{Split, Task, TaskDataset};
use crate::par::{self, ExecPolicy};
use crate::planes::ImagePlane;
use crate::raster::Raster;
use crate::render::{render_image, RadianceField, RadianceSample, RenderConfig, WHITE};

use super::dataset::{DatasetIndex, FrameEntry, ObjectEntry, ObjectManifest, DATASET_INDEX, MANIFEST_NAME};
use super::{write_atomic, write_png, write_sidecar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub objects: usize,
    /// The last `test_objects` objects form the test split.
    pub test_objects: usize,
    pub views: usize,
    pub resolution: usize,
    pub camera_radius: f64,
    pub camera_angle_x: f64,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
    pub sphere_radius: [f64; 2],
    pub box_half_extent: [f64; 2],
    /// Max absolute center offset per axis.
    pub max_offset: f64,
    pub albedo: [f64; 2],
    pub density: [f64; 2],
    pub oracle_samples: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            objects: 40,
            test_objects: 8,
            views: 50,
            resolution: 32,
            camera_radius: 4.0,
            camera_angle_x: 0.7,
            near: 2.0,
            far: 6.0,
            background: WHITE,
            sphere_radius: [0.5, 1.0],
            box_half_extent: [0.35, 0.8],
            max_offset: 0.3,
            albedo: [0.05, 0.95],
            density: [5.0, 20.0],
            oracle_samples: 512,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] <= r[1];
        if self.objects == 0 || self.views < 2 || self.resolution == 0 {
            return Err(Error::contract(
                "need at least one object, two views and a nonzero resolution",
            ));
        }
        if self.test_objects > self.objects {
            return Err(Error::contract("more test objects than objects"));
        }
        if !(0.0 < self.near && self.near < self.far) {
            return Err(Error::contract("need 0 < near < far"));
        }
        if self.density[0] < 0.0
            || !ordered(self.density)
            || !ordered(self.albedo)
            || !ordered(self.sphere_radius)
            || !ordered(self.box_half_extent)
        {
            return Err(Error::contract(
                "sampling ranges must be ordered and densities non-negative",
            ));
        }
        let reach = self.max_offset * 3f64.sqrt() + self.sphere_radius[1].max(self.box_half_extent[1] * 3f64.sqrt());
        if self.camera_radius - reach < self.near || self.camera_radius + reach > self.far {
            return Err(Error::contract(
                "primitives can extend outside [near, far] from the cameras",
            ));
        }
        if self.oracle_samples < 2 {
            return Err(Error::contract("oracle needs at least 2 samples"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Sphere { radius: f64 },
    Box { half_extent: [f64; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub center: [f64; 3],
    pub albedo: [f64; 3],
    pub density: f64,
}

impl Primitive {
    pub fn class_name(&self) -> &'static str {
        match self.kind {
            PrimitiveKind::Sphere { .. } => "sphere",
            PrimitiveKind::Box { .. } => "box",
        }
    }

    pub fn contains(&self, p: &Point3) -> bool {
        let d = p - Vector3::from(self.center);
        match self.kind {
            PrimitiveKind::Sphere { radius } => d.norm_squared() <= radius * radius,
            PrimitiveKind::Box { half_extent } => (0..3).all(|i| d[i].abs() <= half_extent[i]),
        }
    }

    /// Entry and exit depths of the ray's line through the primitive.
    pub fn chord(&self, ray: &Ray) -> Option<(f64, f64)> {
        let o = ray.origin - Vector3::from(self.center);
        match self.kind {
            PrimitiveKind::Sphere { radius } => {
                let b = o.dot(&ray.dir);
                let c = o.norm_squared() - radius * radius;
                let disc = b * b - c;
                (disc > 0.0).then(|| (-b - disc.sqrt(), -b + disc.sqrt()))
            }
            PrimitiveKind::Box { half_extent } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for i in 0..3 {
                    if ray.dir[i].abs() < 1e-300 {
                        if o[i].abs() > half_extent[i] {
                            return None;
                        }
                        continue;
                    }
                    let a = (-half_extent[i] - o[i]) / ray.dir[i];
                    let b = (half_extent[i] - o[i]) / ray.dir[i];
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                (t0 < t1).then_some((t0, t1))
            }
        }
    }

    /// Exact color of a ray over `[near, far]`.
    pub fn exact_color(&self, ray: &Ray, background: [f64; 3]) -> [f64; 3] {
        let length = self
            .chord(ray)
            .map(|(a, b)| (b.min(ray.far) - a.max(ray.near)).max(0.0))
            .unwrap_or(0.0);
        let trans = (-self.density * length).exp();
        let mut out = [0.0; 3];
        for c in 0..3 {
            out[c] = self.albedo[c] * (1.0 - trans) + background[c] * trans;
        }
        out
    }
}

/// A single primitive as a radiance field.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticScene(pub Primitive);

impl RadianceField for SyntheticScene {
    fn query(&self, points: &[Point3], _dirs: &[Vector3<f64>]) -> Result<Vec<RadianceSample>> {
        let p = &self.0;
        Ok(points
            .iter()
            .map(|x| {
                if p.contains(x) {
                    RadianceSample {
                        rgb: p.albedo,
                        sigma: p.density,
                    }
                } else {
                    RadianceSample {
                        rgb: [0.0; 3],
                        sigma: 0.0,
                    }
                }
            })
            .collect())
    }
}

fn sample_primitive(spec: &SyntheticSpec, index: usize, rng: &mut ChaCha8Rng) -> Primitive {
    let mut range = |r: [f64; 2]| if r[0] == r[1] { r[0] } else { rng.gen_range(r[0]..r[1]) };
    let kind = if index.is_multiple_of(2) {
        PrimitiveKind::Sphere {
            radius: range(spec.sphere_radius),
        }
    } else {
        PrimitiveKind::Box {
            half_extent: [
                range(spec.box_half_extent),
                range(spec.box_half_extent),
                range(spec.box_half_extent),
            ],
        }
    };
    let m = spec.max_offset;
    let center = [range([-m, m]), range([-m, m]), range([-m, m])];
    let albedo = [range(spec.albedo), range(spec.albedo), range(spec.albedo)];
    let density = range(spec.density);
    Primitive {
        kind,
        center,
        albedo,
        density,
    }
}

/// Cameras on a Fibonacci sphere, all looking at the origin.
pub fn sphere_cameras(spec: &SyntheticSpec) -> Result<Vec<Camera>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let focal = Camera::focal_from_fov(spec.camera_angle_x, spec.resolution);
    (0..spec.views)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / spec.views as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let eye = Vector3::new(r * phi.cos(), r * phi.sin(), z) * spec.camera_radius;
            Camera::look_at(
                eye,
                Vector3::zeros(),
                Vector3::z(),
                focal,
                spec.resolution,
                spec.resolution,
            )
        })
        .collect()
}

fn matrix_rows(cam: &Camera) -> [[f64; 4]; 4] {
    let m = cam.c2w();
    let mut rows = [[0.0; 4]; 4];
    for (r, row) in rows.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = m[(r, c)];
        }
    }
    rows
}

/// Scenes for every object, in id order; a pure function of the spec.
pub fn synthetic_objects(spec: &SyntheticSpec) -> Vec<Primitive> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.objects).map(|i| sample_primitive(spec, i, &mut rng)).collect()
}

pub fn object_id(index: usize) -> String {
    format!("obj_{index:03}")
}

fn oracle_config(spec: &SyntheticSpec) -> RenderConfig {
    RenderConfig {
        coarse_samples: spec.oracle_samples,
        fine_samples: 0,
        near: spec.near,
        far: spec.far,
        background: spec.background,
        chunk: 256,
        policy: ExecPolicy::Sequential,
    }
}

/// The train and test splits held in memory, pixel for pixel what
/// [`generate_synthetic`] followed by a load would produce.
pub fn synthetic_datasets(spec: &SyntheticSpec, policy: ExecPolicy) -> Result<(TaskDataset, TaskDataset)> {
    spec.validate()?;
    let cameras = sphere_cameras(spec)?;
    let objects = synthetic_objects(spec);
    let oracle = oracle_config(spec);
    let tasks = par::try_map_range(policy, spec.objects, |o| {
        let views = cameras
            .iter()
            .enumerate()
            .map(|(v, cam)| {
                let image = render_image(&SyntheticScene(objects[o]), cam, &oracle)?.image;
                // the sidecar stores f32
                let data = image.data().iter().map(|&x| x as f32 as f64).collect();
                let pixels = Raster::new(image.width(), image.height(), data)?;
                ImagePlane::new(v, pixels, cam.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Task::from_views(object_id(o), views, spec.near, spec.far, spec.background)
    })?;
    let first_test = spec.objects - spec.test_objects;
    let mut train = tasks;
    let test = train.split_off(first_test);
    Ok((
        TaskDataset {
            tasks: train,
            split: Split::Train,
            seed: 0,
        },
        TaskDataset {
            tasks: test,
            split: Split::Test,
            seed: 0,
        },
    ))
}

/// Renders ground truth with a midpoint compositor and writes the dataset.
pub fn generate_synthetic(spec: &SyntheticSpec, root: &Path, policy: ExecPolicy) -> Result<DatasetIndex> {
    spec.validate()?;
    let cameras = sphere_cameras(spec)?;
    let objects = synthetic_objects(spec);
    let oracle = oracle_config(spec);
    let first_test = spec.objects - spec.test_objects;
    let entries: Vec<ObjectEntry> = objects
        .iter()
        .enumerate()
        .map(|(i, p)| ObjectEntry {
            id: object_id(i),
            split: if i >= first_test { Split::Test } else { Split::Train },
            class: Some(p.class_name().to_string()),
        })
        .collect();
    let jobs: Vec<(usize, usize)> = (0..spec.objects)
        .flat_map(|o| (0..spec.views).map(move |v| (o, v)))
        .collect();
    par::try_map(policy, &jobs, |&(o, v)| {
        let image: Raster = render_image(&SyntheticScene(objects[o]), &cameras[v], &oracle)?.image;
        let dir = root.join(object_id(o)).join("views");
        write_png(&dir.join(format!("{v:03}.png")), &image)?;
        write_sidecar(&dir.join(format!("{v:03}.f32")), &image)
    })?;
    for o in 0..spec.objects {
        let manifest = ObjectManifest {
            camera_angle_x: spec.camera_angle_x,
            frames: cameras
                .iter()
                .enumerate()
                .map(|(v, cam)| FrameEntry {
                    file_path: format!("views/{v:03}.png"),
                    transform_matrix: matrix_rows(cam),
                })
                .collect(),
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        write_atomic(&root.join(object_id(o)).join(MANIFEST_NAME), &json)?;
    }
    let index = DatasetIndex {
        near: spec.near,
        far: spec.far,
        background: spec.background,
        resolution: [spec.resolution, spec.resolution],
        objects: entries,
    };
    let json = serde_json::to_vec_pretty(&index).expect("index serializes");
    write_atomic(&root.join(DATASET_INDEX), &json)?;
    let scenes = serde_json::to_vec_pretty(&objects).expect("scenes serialize");
    write_atomic(&root.join("scenes.json"), &scenes)?;
    Ok(index)
}
