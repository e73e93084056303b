//! The per-task photometric objective: adapt θ with the hypernetwork, render a
//! batch of rays coarse then fine, and sum squared color errors of both
//! passes.

use std::sync::Arc;

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, RayLayout, RaySpan, RunningStats, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{importance_depths, stratified_samples, Jitter, Point3, Ray, SampleSet};
use crate::hypernet::{apply_delta_nodes, encode_support, predict_delta, HypernetParams};
use crate::render::{composite, photometric_loss_node, RadianceSample};
use crate::target::{decode, TargetInputs, TargetNodes, TargetParams};

use super::{Task, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewSet {
    Support,
    Query,
}

/// Where a training ray came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RaySource {
    pub set: ViewSet,
    pub view_id: usize,
    pub pixel: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub targets: Vec<[f64; 3]>,
    pub sources: Vec<RaySource>,
    pub coarse: Vec<SampleSet>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

/// Uniform draw of `count` pixels over all views of one set, with jittered
/// coarse depths.
pub fn draw_rays(
    task: &Task,
    set: ViewSet,
    count: usize,
    coarse_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RayBatch> {
    let views = match set {
        ViewSet::Support => &task.support,
        ViewSet::Query => &task.query,
    };
    if views.is_empty() {
        return Err(Error::contract(format!(
            "{}: no views to draw rays from",
            task.object_id
        )));
    }
    let mut batch = RayBatch {
        rays: Vec::with_capacity(count),
        targets: Vec::with_capacity(count),
        sources: Vec::with_capacity(count),
        coarse: Vec::with_capacity(count),
    };
    for _ in 0..count {
        let view = &views[rng.gen_range(0..views.len())];
        let x = rng.gen_range(0..view.pixels.width());
        let y = rng.gen_range(0..view.pixels.height());
        let ray = view.camera.pixel_ray(x, y, task.near, task.far)?;
        batch
            .coarse
            .push(stratified_samples(&ray, coarse_samples, &mut Jitter::Random(rng))?);
        batch.rays.push(ray);
        batch.targets.push(view.pixels.pixel(x, y));
        batch.sources.push(RaySource {
            set,
            view_id: view.view_id,
            pixel: (x, y),
        });
    }
    Ok(batch)
}

/// How fine-pass depths are chosen.
pub enum FineDepths<'a> {
    /// Importance-sample from the coarse weights.
    Sample(&'a mut ChaCha8Rng),
    /// Reuse depths from an earlier evaluation, making the loss a smooth
    /// function of the parameters.
    Fixed(Vec<Vec<f64>>),
}

pub struct TaskLoss<N> {
    pub loss: N,
    pub fine_depths: Vec<Vec<f64>>,
    /// Encoder batch statistics, empty without a hypernetwork.
    pub batch_stats: Vec<RunningStats>,
}

fn sample_points(rays: &[Ray], depths: &[&[f64]]) -> (Vec<Point3>, Vec<Vector3<f64>>) {
    let mut points = Vec::new();
    let mut dirs = Vec::new();
    for (ray, ts) in rays.iter().zip(depths) {
        for &t in *ts {
            points.push(ray.at(t));
            dirs.push(ray.dir);
        }
    }
    (points, dirs)
}

/// The adapted decoder `θ + Δθ` as graph nodes.
pub fn adapted_nodes<G: Graph>(
    g: &mut G,
    cfg: &TrainConfig,
    task: &Task,
    theta: &TargetParams,
    theta_nodes: &TargetNodes<G::Node>,
    hyper: Option<(&HypernetParams, &[G::Node])>,
) -> Result<(TargetNodes<G::Node>, Vec<RunningStats>)> {
    let Some((hp, hyper_nodes)) = hyper else {
        return Ok((theta_nodes.clone(), Vec::new()));
    };
    if cfg.k > task.support.len() {
        return Err(Error::contract(format!(
            "{}: k = {} but only {} support views",
            task.object_id,
            cfg.k,
            task.support.len()
        )));
    }
    let enc = encode_support(g, hp, hyper_nodes, &task.support[..cfg.k], theta, theta_nodes)?;
    let delta = predict_delta(g, hp, hyper_nodes, &enc.latent)?;
    Ok((apply_delta_nodes(g, theta_nodes, &delta)?, enc.batch_stats))
}

/// Summed squared error of the coarse and fine renders of `batch`.
#[allow(clippy::too_many_arguments)]
pub fn task_loss<G: Graph>(
    g: &mut G,
    cfg: &TrainConfig,
    task: &Task,
    theta: &TargetParams,
    theta_nodes: &TargetNodes<G::Node>,
    hyper: Option<(&HypernetParams, &[G::Node])>,
    batch: &RayBatch,
    fine: FineDepths,
) -> Result<TaskLoss<G::Node>> {
    let (adapted, batch_stats) = adapted_nodes(g, cfg, task, theta, theta_nodes, hyper)?;
    let planes = task.conditioning_planes(theta.config.n_planes)?;
    let n_rays = batch.len();

    let coarse_depths: Vec<&[f64]> = batch.coarse.iter().map(SampleSet::depths).collect();
    let (points, dirs) = sample_points(&batch.rays, &coarse_depths);
    let inputs = TargetInputs::build(&theta.config, &points, &dirs, planes)?;
    let (sigma_c, rgb_c) = decode(g, &theta.config, &adapted, &inputs)?;

    let mut spans = Vec::with_capacity(n_rays);
    let mut row = 0;
    for set in &batch.coarse {
        spans.push(RaySpan {
            rows: (row..row + set.len()).collect(),
            deltas: set.deltas().to_vec(),
        });
        row += set.len();
    }
    let coarse_total = row;
    let coarse_layout = Arc::new(RayLayout {
        rays: spans,
        background: task.background,
    });
    let coarse_rgb = g.composite(&sigma_c, &rgb_c, coarse_layout)?;
    let target_data: Vec<f64> = batch.targets.iter().flatten().copied().collect();
    let target = g.constant(Tensor::new(vec![n_rays, 3], target_data)?);
    let coarse_loss = photometric_loss_node(g, &coarse_rgb, &target)?;

    if cfg.fine_samples == 0 {
        return Ok(TaskLoss {
            loss: coarse_loss,
            fine_depths: Vec::new(),
            batch_stats,
        });
    }

    let fine_depths = match fine {
        FineDepths::Fixed(d) => {
            if d.len() != n_rays {
                return Err(Error::contract("fixed fine depths do not match the ray batch"));
            }
            d
        }
        FineDepths::Sample(rng) => {
            let sig = g.value(&sigma_c).data();
            let rgb = g.value(&rgb_c).data();
            let mut out = Vec::with_capacity(n_rays);
            let mut offset = 0;
            for set in &batch.coarse {
                let samples: Vec<RadianceSample> = (offset..offset + set.len())
                    .map(|i| RadianceSample {
                        rgb: [rgb[3 * i], rgb[3 * i + 1], rgb[3 * i + 2]],
                        sigma: sig[i],
                    })
                    .collect();
                let px = composite(&samples, set, task.background)?;
                out.push(importance_depths(
                    set,
                    &px.weights,
                    cfg.fine_samples,
                    &mut Jitter::Random(rng),
                )?);
                offset += set.len();
            }
            out
        }
    };

    let fine_refs: Vec<&[f64]> = fine_depths.iter().map(Vec::as_slice).collect();
    let (points, dirs) = sample_points(&batch.rays, &fine_refs);
    let inputs = TargetInputs::build(&theta.config, &points, &dirs, planes)?;
    let (sigma_f, rgb_f) = decode(g, &theta.config, &adapted, &inputs)?;
    let sigma_all = g.concat(&[&sigma_c, &sigma_f], 0)?;
    let rgb_all = g.concat(&[&rgb_c, &rgb_f], 0)?;

    let mut spans = Vec::with_capacity(n_rays);
    let mut fine_row = coarse_total;
    let mut coarse_row = 0;
    for (ray, (set, fd)) in batch.rays.iter().zip(batch.coarse.iter().zip(&fine_depths)) {
        let mut tagged: Vec<(f64, usize)> = set
            .depths()
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, coarse_row + i))
            .chain(fd.iter().enumerate().map(|(j, &t)| (t, fine_row + j)))
            .collect();
        tagged.sort_by(|a, b| a.0.total_cmp(&b.0));
        let merged = SampleSet::from_depths(tagged.iter().map(|p| p.0).collect(), ray.far)?;
        spans.push(RaySpan {
            rows: tagged.iter().map(|p| p.1).collect(),
            deltas: merged.deltas().to_vec(),
        });
        coarse_row += set.len();
        fine_row += fd.len();
    }
    let fine_layout = Arc::new(RayLayout {
        rays: spans,
        background: task.background,
    });
    let fine_rgb = g.composite(&sigma_all, &rgb_all, fine_layout)?;
    let fine_loss = photometric_loss_node(g, &fine_rgb, &target)?;
    let loss = g.add(&coarse_loss, &fine_loss)?;
    Ok(TaskLoss {
        loss,
        fine_depths,
        batch_stats,
    })
}
