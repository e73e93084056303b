//! Pinhole cameras, ray generation, and depth sampling along rays.
//!
//! Convention: camera looks down −z with +y up and +x right. Pixel `(x, y)`
//! has its center at `(x + 0.5, y + 0.5)` with `y` growing downwards.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

/// Floor added to every coarse weight before building the importance PDF.
pub const IMPORTANCE_WEIGHT_FLOOR: f64 = 1e-5;

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    c2w: Matrix4<f64>,
    focal: f64,
    width: usize,
    height: usize,
    cx: f64,
    cy: f64,
}

/// Largest absolute entry of `RᵀR − I`.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max()
}

impl Camera {
    /// Camera with the principal point at the image center.
    pub fn new(c2w: Matrix4<f64>, focal: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Camera {
            c2w,
            focal,
            width,
            height,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn with_principal_point(mut self, cx: f64, cy: f64) -> Self {
        self.cx = cx;
        self.cy = cy;
        self
    }

    /// Camera at `eye` looking at `target`.
    pub fn look_at(
        eye: Point3,
        target: Point3,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let back = (eye - target)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Geometry("look_at: eye equals target".into()))?;
        let right = up
            .cross(&back)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Geometry("look_at: up parallel to view axis".into()))?;
        let true_up = back.cross(&right);
        let mut c2w = Matrix4::identity();
        for i in 0..3 {
            c2w[(i, 0)] = right[i];
            c2w[(i, 1)] = true_up[i];
            c2w[(i, 2)] = back[i];
            c2w[(i, 3)] = eye[i];
        }
        Camera::new(c2w, focal, width, height)
    }

    /// Focal length (pixels) for a horizontal field of view.
    pub fn focal_from_fov(fov_x: f64, width: usize) -> f64 {
        0.5 * width as f64 / (0.5 * fov_x).tan()
    }

    fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(Error::Geometry(format!("focal must be > 0, got {}", self.focal)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Geometry("image has zero extent".into()));
        }
        if !self.c2w.iter().all(|v| v.is_finite()) {
            return Err(Error::Geometry("camera matrix has non-finite entries".into()));
        }
        let r = self.rotation();
        let err = orthonormality_error(&r);
        if err > ORTHONORMAL_TOL || r.determinant() <= 0.0 {
            return Err(Error::Geometry(format!(
                "camera rotation is singular or not orthonormal (error {err:.3e})"
            )));
        }
        let bottom = [self.c2w[(3, 0)], self.c2w[(3, 1)], self.c2w[(3, 2)], self.c2w[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Geometry("camera matrix is not affine".into()));
        }
        Ok(())
    }

    pub fn c2w(&self) -> &Matrix4<f64> {
        &self.c2w
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.c2w.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn origin(&self) -> Point3 {
        self.c2w.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Unit viewing direction: the camera's −z axis in world space.
    pub fn view_direction(&self) -> Vector3<f64> {
        -self.c2w.fixed_view::<3, 1>(0, 2).into_owned().normalize()
    }

    pub fn focal(&self) -> f64 {
        self.focal
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.cx, self.cy)
    }

    pub fn world_to_camera(&self, p: &Point3) -> Point3 {
        self.rotation().transpose() * (p - self.origin())
    }

    /// Pinhole projection of a camera-space point in front of the camera
    /// (`z < 0`) to continuous pixel coordinates.
    pub fn camera_to_pixel(&self, pc: &Point3) -> (f64, f64) {
        let depth = -pc.z;
        (self.cx + self.focal * pc.x / depth, self.cy - self.focal * pc.y / depth)
    }

    /// World-space ray through the center of pixel `(x, y)`.
    pub fn pixel_ray(&self, x: usize, y: usize, near: f64, far: f64) -> Result<Ray> {
        if x >= self.width || y >= self.height {
            return Err(Error::contract(format!(
                "pixel ({x}, {y}) outside {}x{} image",
                self.width, self.height
            )));
        }
        let u = x as f64 + 0.5;
        let v = y as f64 + 0.5;
        let dir_cam = Vector3::new((u - self.cx) / self.focal, -(v - self.cy) / self.focal, -1.0);
        Ray::new(self.origin(), self.rotation() * dir_cam, near, far)
    }
}

/// One ray per requested `(x, y)` pixel.
pub fn camera_rays(camera: &Camera, pixels: &[(usize, usize)], near: f64, far: f64) -> Result<Vec<Ray>> {
    pixels.iter().map(|&(x, y)| camera.pixel_ray(x, y, near, far)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ray {
    pub origin: Point3,
    /// Unit length.
    pub dir: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: Point3, dir: Vector3<f64>, near: f64, far: f64) -> Result<Self> {
        let dir = dir
            .try_normalize(1e-300)
            .ok_or_else(|| Error::Geometry("zero-length ray direction".into()))?;
        if !(0.0 < near && near < far) {
            return Err(Error::Geometry(format!(
                "ray bounds must satisfy 0 < near < far, got [{near}, {far}]"
            )));
        }
        Ok(Ray { origin, dir, near, far })
    }

    pub fn at(&self, t: f64) -> Point3 {
        self.origin + self.dir * t
    }
}

/// Source of the per-bin offsets used by the samplers.
pub enum Jitter<'a> {
    /// Bin midpoints for stratified sampling, evenly spaced quantiles for
    /// importance sampling.
    Deterministic,
    Random(&'a mut ChaCha8Rng),
}

impl Jitter<'_> {
    /// Quantile for slot `slot` of `count` evenly spread draws.
    fn unit(&mut self, slot: usize, count: usize) -> f64 {
        match self {
            Jitter::Deterministic => (slot as f64 + 0.5) / count as f64,
            Jitter::Random(rng) => rng.gen::<f64>(),
        }
    }

    /// Offset within a single bin.
    fn offset(&mut self) -> f64 {
        match self {
            Jitter::Deterministic => 0.5,
            Jitter::Random(rng) => rng.gen::<f64>(),
        }
    }
}

/// Sorted depths along a ray with their interval widths.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    t: Vec<f64>,
    deltas: Vec<f64>,
    far: f64,
}

impl SampleSet {
    /// Builds a set from depths in `[near, far]`. The last width is `far − t_N`.
    pub fn from_depths(mut t: Vec<f64>, far: f64) -> Result<Self> {
        if t.is_empty() {
            return Err(Error::contract("sample set needs at least one depth"));
        }
        t.sort_by(f64::total_cmp);
        let mut deltas = Vec::with_capacity(t.len());
        for i in 0..t.len() {
            let next = t.get(i + 1).copied().unwrap_or(far);
            deltas.push(next - t[i]);
        }
        if deltas.iter().any(|d| *d < 0.0 || !d.is_finite()) {
            return Err(Error::contract("sample depths exceed the far bound"));
        }
        Ok(SampleSet { t, deltas, far })
    }

    pub fn depths(&self) -> &[f64] {
        &self.t
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn far(&self) -> f64 {
        self.far
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Union with `extra` depths, re-sorted.
    pub fn merged(&self, extra: &[f64]) -> Result<SampleSet> {
        let mut t = self.t.clone();
        t.extend_from_slice(extra);
        SampleSet::from_depths(t, self.far)
    }
}

/// One draw per equal-width bin of `[near, far]`, sorted.
pub fn stratified_depths(near: f64, far: f64, n: usize, jitter: &mut Jitter) -> Vec<f64> {
    let width = (far - near) / n as f64;
    (0..n)
        .map(|i| {
            let u = jitter.offset();
            near + (i as f64 + u) * width
        })
        .collect()
}

pub fn stratified_samples(ray: &Ray, n_samples: usize, jitter: &mut Jitter) -> Result<SampleSet> {
    if n_samples < 2 {
        return Err(Error::contract("stratified sampling needs at least 2 samples"));
    }
    SampleSet::from_depths(stratified_depths(ray.near, ray.far, n_samples, jitter), ray.far)
}

/// New depths drawn by inverting the piecewise-constant CDF over the coarse
/// bins `[t_i, t_i + δ_i]`, with density ∝ `weights + IMPORTANCE_WEIGHT_FLOOR`.
pub fn importance_depths(
    coarse: &SampleSet,
    weights: &[f64],
    n_importance: usize,
    jitter: &mut Jitter,
) -> Result<Vec<f64>> {
    if weights.len() != coarse.len() {
        return Err(Error::contract(format!(
            "{} weights for {} coarse samples",
            weights.len(),
            coarse.len()
        )));
    }
    if weights.iter().any(|w| w.is_nan() || *w < 0.0) {
        return Err(Error::contract("importance weights must be non-negative"));
    }
    let pdf: Vec<f64> = weights.iter().map(|w| w + IMPORTANCE_WEIGHT_FLOOR).collect();
    let total: f64 = pdf.iter().sum();
    let mut cdf = Vec::with_capacity(pdf.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for p in &pdf {
        acc += p / total;
        cdf.push(acc);
    }
    let bins = pdf.len();
    cdf[bins] = 1.0;
    let mut out = Vec::with_capacity(n_importance);
    for j in 0..n_importance {
        let u = jitter.unit(j, n_importance);
        // first bin whose upper cdf edge exceeds u
        let b = cdf[1..].partition_point(|&c| c <= u).min(bins - 1);
        let span = cdf[b + 1] - cdf[b];
        let frac = if span > 0.0 { (u - cdf[b]) / span } else { 0.5 };
        out.push(coarse.t[b] + frac.clamp(0.0, 1.0) * coarse.deltas[b]);
    }
    Ok(out)
}

/// Importance samples merged with the coarse set.
pub fn importance_samples(
    coarse: &SampleSet,
    weights: &[f64],
    n_importance: usize,
    jitter: &mut Jitter,
) -> Result<SampleSet> {
    let fine = importance_depths(coarse, weights, n_importance, jitter)?;
    coarse.merged(&fine)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn identity_cam(size: usize, focal: f64) -> Camera {
        Camera::new(Matrix4::identity(), focal, size, size).unwrap()
    }

    #[test]
    fn center_pixel_looks_down_negative_z() {
        let cam = identity_cam(5, 10.0);
        let ray = cam.pixel_ray(2, 2, 1.0, 2.0).unwrap();
        assert_abs_diff_eq!(ray.dir, Vector3::new(0.0, 0.0, -1.0), epsilon = 1e-15);
    }

    #[test]
    fn one_column_right_of_center() {
        let f = 10.0;
        let cam = identity_cam(5, f);
        let ray = cam.pixel_ray(3, 2, 1.0, 2.0).unwrap();
        let expected = Vector3::new(1.0 / f, 0.0, -1.0).normalize();
        assert_abs_diff_eq!(ray.dir, expected, epsilon = 1e-15);
    }

    #[test]
    fn translation_moves_origins_only() {
        let mut c2w = Matrix4::identity();
        c2w[(0, 3)] = 1.0;
        c2w[(1, 3)] = -2.0;
        c2w[(2, 3)] = 3.0;
        let moved = Camera::new(c2w, 10.0, 5, 5).unwrap();
        let base = identity_cam(5, 10.0);
        let a = base.pixel_ray(1, 4, 1.0, 2.0).unwrap();
        let b = moved.pixel_ray(1, 4, 1.0, 2.0).unwrap();
        assert_eq!(a.dir, b.dir);
        assert_abs_diff_eq!(b.origin, Vector3::new(1.0, -2.0, 3.0), epsilon = 1e-15);
    }

    #[test]
    fn rejects_bad_cameras() {
        let mut c2w = Matrix4::identity();
        c2w[(0, 0)] = 2.0;
        assert!(matches!(Camera::new(c2w, 1.0, 4, 4), Err(Error::Geometry(_))));
        assert!(matches!(
            Camera::new(Matrix4::zeros(), 1.0, 4, 4),
            Err(Error::Geometry(_))
        ));
        assert!(matches!(
            Camera::new(Matrix4::identity(), 0.0, 4, 4),
            Err(Error::Geometry(_))
        ));
        assert!(identity_cam(4, 1.0).pixel_ray(4, 0, 1.0, 2.0).is_err());
    }

    #[test]
    fn stratified_midpoints() {
        let ray = Ray::new(Point3::zeros(), Vector3::z(), 2.0, 6.0).unwrap();
        let s = stratified_samples(&ray, 4, &mut Jitter::Deterministic).unwrap();
        assert_eq!(s.depths(), &[2.5, 3.5, 4.5, 5.5]);
        assert_eq!(s.deltas(), &[1.0, 1.0, 1.0, 0.5]);
    }

    #[test]
    fn stratified_one_sample_per_bin() {
        let ray = Ray::new(Point3::zeros(), Vector3::z(), 2.0, 6.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let s = stratified_samples(&ray, 4, &mut Jitter::Random(&mut rng)).unwrap();
            for (i, t) in s.depths().iter().enumerate() {
                let lo = 2.0 + i as f64;
                assert!(*t >= lo && *t <= lo + 1.0);
            }
        }
    }

    #[test]
    fn importance_zero_count_is_identity() {
        let coarse = SampleSet::from_depths(vec![2.5, 3.5, 4.5, 5.5], 6.0).unwrap();
        let out = importance_samples(&coarse, &[0.1, 0.2, 0.3, 0.4], 0, &mut Jitter::Deterministic).unwrap();
        assert_eq!(out, coarse);
    }

    #[test]
    fn importance_rejects_negative_weights() {
        let coarse = SampleSet::from_depths(vec![2.5, 3.5], 6.0).unwrap();
        assert!(importance_depths(&coarse, &[-1.0, 1.0], 4, &mut Jitter::Deterministic).is_err());
    }
}
