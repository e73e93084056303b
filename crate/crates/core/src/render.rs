//! Quadrature compositing of per-sample radiance into pixel colors.
//!
//! For samples sorted by depth with widths δ_i:
//! α_i = 1 − exp(−σ_i δ_i), T_i = Π_{j<i}(1 − α_j), w_i = T_i α_i and
//! Ĉ = Σ w_i c_i + T_final · background.

use nalgebra::Vector3;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::geometry::{importance_depths, stratified_samples, Camera, Jitter, Point3, Ray, SampleSet};
use crate::par::{self, ExecPolicy};
use crate::raster::Raster;

pub const WHITE: [f64; 3] = [1.0, 1.0, 1.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadianceSample {
    pub rgb: [f64; 3],
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPixel {
    pub color: [f64; 3],
    pub weights: Vec<f64>,
    pub t_final: f64,
    pub opacity: f64,
}

/// Writes compositing weights into `weights` and returns the transmittance
/// left after the last sample.
pub(crate) fn transmittance_weights(sigma: &[f64], delta: &[f64], weights: &mut [f64]) -> f64 {
    let mut trans = 1.0;
    for ((s, d), w) in sigma.iter().zip(delta).zip(weights.iter_mut()) {
        let pass = (-s * d).exp();
        *w = trans * (1.0 - pass);
        trans *= pass;
    }
    trans
}

pub fn composite(samples: &[RadianceSample], set: &SampleSet, background: [f64; 3]) -> Result<RenderedPixel> {
    if samples.len() != set.len() {
        return Err(Error::contract(format!(
            "{} radiance samples for {} depths",
            samples.len(),
            set.len()
        )));
    }
    let sigma: Vec<f64> = samples.iter().map(|s| s.sigma).collect();
    let mut weights = vec![0.0; samples.len()];
    let t_final = transmittance_weights(&sigma, set.deltas(), &mut weights);
    let mut color = background.map(|b| b * t_final);
    for (s, w) in samples.iter().zip(&weights) {
        for (c, v) in color.iter_mut().zip(s.rgb) {
            *c += w * v;
        }
    }
    let opacity = weights.iter().sum();
    Ok(RenderedPixel {
        color,
        weights,
        t_final,
        opacity,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Sum over rays; the form optimized during training.
    Sum,
    /// Mean over rays; for logging.
    Mean,
}

/// Σ_r ‖Ĉ(r) − C(r)‖².
pub fn photometric_loss(rendered: &[[f64; 3]], target: &[[f64; 3]], reduction: Reduction) -> Result<f64> {
    if rendered.len() != target.len() {
        return Err(Error::contract(format!(
            "loss over {} rendered vs {} target rays",
            rendered.len(),
            target.len()
        )));
    }
    let sum: f64 = rendered
        .iter()
        .zip(target)
        .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(match reduction {
        Reduction::Sum => sum,
        Reduction::Mean if rendered.is_empty() => 0.0,
        Reduction::Mean => sum / rendered.len() as f64,
    })
}

/// Graph form of the summed photometric loss over `[rays, 3]` nodes.
pub fn photometric_loss_node<G: Graph>(g: &mut G, rendered: &G::Node, target: &G::Node) -> Result<G::Node> {
    if g.value(rendered).shape() != g.value(target).shape() {
        return Err(Error::contract(format!(
            "loss shapes differ: {:?} vs {:?}",
            g.value(rendered).shape(),
            g.value(target).shape()
        )));
    }
    let diff = g.sub(rendered, target)?;
    let sq = g.square(&diff)?;
    g.sum(&sq, None)
}

/// Anything that can be queried for color and density in batches.
pub trait RadianceField: Sync {
    /// One sample per `(point, direction)` pair.
    fn query(&self, points: &[Point3], dirs: &[Vector3<f64>]) -> Result<Vec<RadianceSample>>;
}

/// Empty space.
#[derive(Debug, Clone, Copy, Default)]
pub struct Vacuum;

impl RadianceField for Vacuum {
    fn query(&self, points: &[Point3], _dirs: &[Vector3<f64>]) -> Result<Vec<RadianceSample>> {
        Ok(vec![
            RadianceSample {
                rgb: [0.0; 3],
                sigma: 0.0
            };
            points.len()
        ])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderConfig {
    pub coarse_samples: usize,
    pub fine_samples: usize,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
    /// Rays per field query batch.
    pub chunk: usize,
    pub policy: ExecPolicy,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            coarse_samples: 64,
            fine_samples: 128,
            near: 2.0,
            far: 6.0,
            background: WHITE,
            chunk: 256,
            policy: ExecPolicy::Parallel,
        }
    }
}

fn query_depths(field: &dyn RadianceField, rays: &[Ray], depths: &[Vec<f64>]) -> Result<Vec<Vec<RadianceSample>>> {
    let mut points = Vec::new();
    let mut dirs = Vec::new();
    for (ray, ts) in rays.iter().zip(depths) {
        for &t in ts {
            points.push(ray.at(t));
            dirs.push(ray.dir);
        }
    }
    let mut flat = field.query(&points, &dirs)?.into_iter();
    if flat.len() != points.len() {
        return Err(Error::contract("radiance field returned the wrong sample count"));
    }
    Ok(depths.iter().map(|ts| flat.by_ref().take(ts.len()).collect()).collect())
}

fn render_chunk(field: &dyn RadianceField, rays: &[Ray], cfg: &RenderConfig) -> Result<Vec<RenderedPixel>> {
    let coarse: Vec<SampleSet> = rays
        .iter()
        .map(|r| stratified_samples(r, cfg.coarse_samples, &mut Jitter::Deterministic))
        .collect::<Result<_>>()?;
    let coarse_depths: Vec<Vec<f64>> = coarse.iter().map(|s| s.depths().to_vec()).collect();
    let coarse_rad = query_depths(field, rays, &coarse_depths)?;
    if cfg.fine_samples == 0 {
        return coarse
            .iter()
            .zip(&coarse_rad)
            .map(|(set, rad)| composite(rad, set, cfg.background))
            .collect();
    }
    let mut fine_depths = Vec::with_capacity(rays.len());
    for (set, rad) in coarse.iter().zip(&coarse_rad) {
        let px = composite(rad, set, cfg.background)?;
        fine_depths.push(importance_depths(
            set,
            &px.weights,
            cfg.fine_samples,
            &mut Jitter::Deterministic,
        )?);
    }
    let fine_rad = query_depths(field, rays, &fine_depths)?;
    let mut out = Vec::with_capacity(rays.len());
    for i in 0..rays.len() {
        let mut tagged: Vec<(f64, RadianceSample)> = coarse_depths[i]
            .iter()
            .copied()
            .zip(coarse_rad[i].iter().copied())
            .chain(fine_depths[i].iter().copied().zip(fine_rad[i].iter().copied()))
            .collect();
        tagged.sort_by(|a, b| a.0.total_cmp(&b.0));
        let set = SampleSet::from_depths(tagged.iter().map(|p| p.0).collect(), rays[i].far)?;
        let rad: Vec<RadianceSample> = tagged.into_iter().map(|p| p.1).collect();
        out.push(composite(&rad, &set, cfg.background)?);
    }
    Ok(out)
}

/// Two-pass (stratified, then importance) render of arbitrary rays.
pub fn render_rays(field: &dyn RadianceField, rays: &[Ray], cfg: &RenderConfig) -> Result<Vec<RenderedPixel>> {
    if cfg.coarse_samples < 2 {
        return Err(Error::contract("render needs at least 2 coarse samples"));
    }
    let chunks: Vec<&[Ray]> = rays.chunks(cfg.chunk.max(1)).collect();
    let parts = par::try_map(cfg.policy, &chunks, |chunk| render_chunk(field, chunk, cfg))?;
    Ok(parts.into_iter().flatten().collect())
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: Raster,
    pub pixels: Vec<RenderedPixel>,
}

pub fn render_image(field: &dyn RadianceField, camera: &Camera, cfg: &RenderConfig) -> Result<RenderOutput> {
    let (w, h) = (camera.width(), camera.height());
    let mut rays = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            rays.push(camera.pixel_ray(x, y, cfg.near, cfg.far)?);
        }
    }
    let pixels = render_rays(field, &rays, cfg)?;
    let data = pixels.iter().flat_map(|p| p.color).collect();
    Ok(RenderOutput {
        image: Raster::new(w, h, data)?,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(depths: &[f64], far: f64) -> SampleSet {
        SampleSet::from_depths(depths.to_vec(), far).unwrap()
    }

    #[test]
    fn empty_space_shows_background() {
        let s = set(&[2.5, 3.5], 4.0);
        let samples = [RadianceSample {
            rgb: [0.2, 0.3, 0.4],
            sigma: 0.0,
        }; 2];
        let px = composite(&samples, &s, WHITE).unwrap();
        assert_eq!(px.color, WHITE);
        assert_eq!(px.t_final, 1.0);
    }

    #[test]
    fn two_sample_hand_quadrature() {
        let s = set(&[0.0, 0.5], 1.0);
        let samples = [
            RadianceSample {
                rgb: [1.0, 0.0, 0.0],
                sigma: 1.0,
            },
            RadianceSample {
                rgb: [0.0, 1.0, 0.0],
                sigma: 2.0,
            },
        ];
        let px = composite(&samples, &s, [0.0; 3]).unwrap();
        let w1 = 1.0 - (-0.5f64).exp();
        let w2 = (-0.5f64).exp() * (1.0 - (-1.0f64).exp());
        assert!((w1 - 0.39347).abs() < 1e-5 && (w2 - 0.38340).abs() < 1e-5);
        assert!((px.color[0] - w1).abs() < 1e-15);
        assert!((px.color[1] - w2).abs() < 1e-15);
        assert_eq!(px.color[2], 0.0);
        assert!((px.opacity + px.t_final - 1.0).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch_is_contract_error() {
        let s = set(&[2.5, 3.5], 4.0);
        let r = composite(&[], &s, WHITE);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn loss_semantics() {
        assert_eq!(
            photometric_loss(&[[0.3, 0.2, 0.1]], &[[0.3, 0.2, 0.1]], Reduction::Sum).unwrap(),
            0.0
        );
        assert_eq!(
            photometric_loss(&[[1.0, 0.0, 0.0]], &[[0.0; 3]], Reduction::Sum).unwrap(),
            1.0
        );
        let rendered = [[0.5, 0.0, 0.0], [0.5, 0.5, 0.5]];
        let target = [[0.0; 3], [0.0; 3]];
        assert_eq!(photometric_loss(&rendered, &target, Reduction::Sum).unwrap(), 1.0);
        assert_eq!(photometric_loss(&rendered, &target, Reduction::Mean).unwrap(), 0.5);
        assert!(photometric_loss(&rendered, &target[..1], Reduction::Sum).is_err());
    }

    #[test]
    fn vacuum_renders_background() {
        let cam = Camera::look_at(Point3::new(0.0, 0.0, 4.0), Point3::zeros(), Vector3::y(), 8.0, 6, 5).unwrap();
        let cfg = RenderConfig {
            coarse_samples: 8,
            fine_samples: 8,
            background: [0.2, 0.4, 0.6],
            ..Default::default()
        };
        let out = render_image(&Vacuum, &cam, &cfg).unwrap();
        assert_eq!(out.image, Raster::filled(6, 5, [0.2, 0.4, 0.6]));
    }
}
