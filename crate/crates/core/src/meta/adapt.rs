//! Inference: one-step adaptation, optional support-only fine-tuning of the
//! hypernetwork, and rendering plus scoring of query views.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{AdamState, Tape, Tensor};
use crate::error::{Error, Result};
use crate::hypernet::HypernetParams;
use crate::metrics::{psnr, ssim, MetricReport, ViewMetrics};
use crate::par;
use crate::raster::Raster;
use crate::render::render_image;
use crate::target::{ConditionedField, TargetParams};

use super::loss::{draw_rays, task_loss, FineDepths, ViewSet};
use super::{Task, TaskDataset, TrainConfig};

/// `iters` Adam steps on the hypernetwork weights against support-view rays
/// only. θ is read, never written.
pub fn fine_tune(
    cfg: &TrainConfig,
    task: &Task,
    theta: &TargetParams,
    hyper: &HypernetParams,
    iters: usize,
    rng: &mut ChaCha8Rng,
) -> Result<HypernetParams> {
    let mut tuned = hyper.clone();
    if iters == 0 {
        return Ok(tuned);
    }
    let mut adam = AdamState::new(cfg.ft_adam, tuned.params.tensors());
    for it in 0..iters {
        let batch = draw_rays(task, ViewSet::Support, cfg.ft_rays, cfg.coarse_samples, rng)?;
        if let Some(bad) = batch.sources.iter().find(|s| s.set != ViewSet::Support) {
            return Err(Error::contract(format!(
                "fine-tuning drew a ray from non-support view {}",
                bad.view_id
            )));
        }
        let mut tape = Tape::new();
        let theta_nodes = theta.to_nodes(&mut tape, false);
        let hyper_nodes = tuned.to_nodes(&mut tape, true);
        let out = match task_loss(
            &mut tape,
            cfg,
            task,
            theta,
            &theta_nodes,
            Some((&tuned, &hyper_nodes)),
            &batch,
            FineDepths::Sample(rng),
        ) {
            Ok(out) => out,
            Err(Error::Numerics(msg)) => {
                log::warn!("fine-tune iteration {it} skipped: {msg}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let grads = tape.backward(out.loss)?;
        let g: Vec<Tensor> = hyper_nodes
            .iter()
            .zip(tuned.params.tensors())
            .map(|(&v, t)| grads.wrt(v, t))
            .collect();
        if !g.iter().all(Tensor::is_finite) {
            log::warn!("fine-tune iteration {it} skipped: non-finite gradient");
            continue;
        }
        adam.step(tuned.params.tensors_mut(), &g)?;
    }
    Ok(tuned)
}

/// Task-specific decoder weights. With `ft_iters == 0` this is a single
/// encode → predict → apply pass with no gradient machinery.
pub fn adapt_task(
    cfg: &TrainConfig,
    theta: &TargetParams,
    hyper: Option<&HypernetParams>,
    task: &Task,
    ft_iters: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TargetParams> {
    let Some(hp) = hyper else {
        return Ok(theta.clone());
    };
    if cfg.k > task.support.len() {
        return Err(Error::contract(format!(
            "{}: k = {} but only {} support views",
            task.object_id,
            cfg.k,
            task.support.len()
        )));
    }
    let hyperplanes = &task.support[..cfg.k];
    if ft_iters == 0 {
        return hp.adapt(theta, hyperplanes);
    }
    let tuned = fine_tune(cfg, task, theta, hp, ft_iters, rng)?;
    tuned.adapt(theta, hyperplanes)
}

#[derive(Debug, Clone)]
pub struct AdaptResult {
    pub adapted: TargetParams,
    pub images: Vec<(usize, Raster)>,
    pub metrics: Vec<ViewMetrics>,
}

/// Adapts to `task` and renders the query views at `views` (indices into
/// `task.query`), scoring each against its ground truth.
pub fn adapt_and_render(
    cfg: &TrainConfig,
    theta: &TargetParams,
    hyper: Option<&HypernetParams>,
    task: &Task,
    ft_iters: usize,
    views: &[usize],
    seed: u64,
) -> Result<AdaptResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adapted = adapt_task(cfg, theta, hyper, task, ft_iters, &mut rng)?;
    let field = ConditionedField {
        params: &adapted,
        planes: task.conditioning_planes(adapted.config.n_planes)?,
    };
    let render_cfg = cfg.render_config(task.near, task.far, task.background);
    let mut images = Vec::with_capacity(views.len());
    let mut metrics = Vec::with_capacity(views.len());
    for &v in views {
        let view = task
            .query
            .get(v)
            .ok_or_else(|| Error::contract(format!("{}: no query view at index {v}", task.object_id)))?;
        let image = render_image(&field, &view.camera, &render_cfg)?.image;
        metrics.push(ViewMetrics {
            object: task.object_id.clone(),
            view_id: view.view_id,
            psnr: psnr(&image, &view.pixels, 1.0)?,
            ssim: ssim(&image, &view.pixels)?,
        });
        images.push((view.view_id, image));
    }
    Ok(AdaptResult {
        adapted,
        images,
        metrics,
    })
}

/// Per-task random stream seed used by evaluation.
pub fn task_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64).wrapping_mul(0xA24B_AED4_963E_E407)
}

/// Mean metrics over the first `views_per_task` query views of every task.
pub fn evaluate(
    cfg: &TrainConfig,
    theta: &TargetParams,
    hyper: Option<&HypernetParams>,
    data: &TaskDataset,
    ft_iters: usize,
    views_per_task: usize,
    seed: u64,
) -> Result<MetricReport> {
    let per_task = par::try_map_range(cfg.policy, data.len(), |i| {
        let task = &data.tasks[i];
        let views: Vec<usize> = (0..views_per_task.min(task.query.len())).collect();
        Ok(adapt_and_render(cfg, theta, hyper, task, ft_iters, &views, task_seed(seed, i))?.metrics)
    })?;
    Ok(MetricReport::from_views(per_task.into_iter().flatten().collect()))
}
