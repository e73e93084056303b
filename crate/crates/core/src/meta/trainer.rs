use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{AdamState, Graph, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::hypernet::HypernetParams;
use crate::io::{Checkpoint, RngSnapshot};
use crate::metrics::MetricReport;
use crate::target::TargetParams;

use super::adapt::evaluate;
use super::loss::{draw_rays, task_loss, FineDepths, ViewSet};
use super::{EpochSampler, LogRow, RunLog, TaskDataset, TrainConfig};

/// Meta-training state: shared decoder weights, hypernetwork, one Adam per
/// component, and the random streams.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub theta: TargetParams,
    pub hyper: HypernetParams,
    pub adam_theta: AdamState,
    pub adam_delta: AdamState,
    pub rng: ChaCha8Rng,
    pub sampler: EpochSampler,
    pub step: u64,
    /// Steps aborted by the divergence guard.
    pub skipped: u64,
    pub log: RunLog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub train: Option<MetricReport>,
    pub test: Option<MetricReport>,
}

fn gradients_of(grads: &crate::autograd::Gradients, vars: &[Var], like: &[Tensor]) -> Vec<Tensor> {
    vars.iter().zip(like).map(|(&v, t)| grads.wrt(v, t)).collect()
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mask = config.mask()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let theta = TargetParams::init(config.target.clone(), &mut init_rng)?;
        let hyper = HypernetParams::init(config.hypernet.clone(), config.target.clone(), mask, &mut init_rng)?;
        let adam_theta = AdamState::new(config.theta_adam, theta.params.tensors());
        let adam_delta = AdamState::new(config.delta_adam, hyper.params.tensors());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Trainer {
            sampler: EpochSampler::new(config.seed),
            config,
            theta,
            hyper,
            adam_theta,
            adam_delta,
            rng,
            step: 0,
            skipped: 0,
            log: RunLog::default(),
        })
    }

    /// One meta-training step. On a numerics failure θ, δ and both Adam
    /// states are untouched.
    pub fn train_step(&mut self, data: &TaskDataset) -> Result<f64> {
        let start = Instant::now();
        let cfg = &self.config;
        let indices = self.sampler.next_indices(cfg.tasks_per_step, data.len())?;
        let mut tape = Tape::new();
        let theta_nodes = self.theta.to_nodes(&mut tape, true);
        let hyper_nodes = if cfg.hypernet_enabled {
            Some(self.hyper.to_nodes(&mut tape, true))
        } else {
            None
        };
        let mut total: Option<Var> = None;
        let mut stats = Vec::new();
        for &i in &indices {
            let task = &data.tasks[i];
            let batch = draw_rays(
                task,
                ViewSet::Query,
                cfg.rays_per_step,
                cfg.coarse_samples,
                &mut self.rng,
            )?;
            let hyper = hyper_nodes.as_deref().map(|n| (&self.hyper, n));
            let out = task_loss(
                &mut tape,
                cfg,
                task,
                &self.theta,
                &theta_nodes,
                hyper,
                &batch,
                FineDepths::Sample(&mut self.rng),
            )?;
            stats.push(out.batch_stats);
            total = Some(match total {
                None => out.loss,
                Some(t) => tape.add(&t, &out.loss)?,
            });
        }
        let loss_var = total.expect("at least one task per step");
        let loss = tape.value(&loss_var).item()?;
        if !loss.is_finite() {
            return Err(Error::numerics(format!("step {}: loss is {loss}", self.step)));
        }
        let grads = tape.backward(loss_var)?;
        let theta_grads = gradients_of(&grads, &theta_nodes.nodes, self.theta.params.tensors());
        let hyper_grads = hyper_nodes
            .as_ref()
            .map(|n| gradients_of(&grads, n, self.hyper.params.tensors()));
        let all_finite = theta_grads
            .iter()
            .chain(hyper_grads.iter().flatten())
            .all(Tensor::is_finite);
        if !all_finite {
            return Err(Error::numerics(format!("step {}: non-finite gradient", self.step)));
        }
        self.adam_theta.step(self.theta.params.tensors_mut(), &theta_grads)?;
        if let Some(hg) = hyper_grads {
            self.adam_delta.step(self.hyper.params.tensors_mut(), &hg)?;
            for s in &stats {
                self.hyper.update_running(s);
            }
        }
        self.step += 1;
        self.log.push(LogRow {
            step: self.step,
            loss,
            psnr_train: None,
            psnr_test: None,
            ssim_test: None,
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(loss)
    }

    /// Runs `steps` guarded steps, evaluating on the configured cadence.
    /// `after_step` sees the trainer and any evaluation that just ran.
    pub fn run(
        &mut self,
        train: &TaskDataset,
        test: Option<&TaskDataset>,
        steps: u64,
        mut after_step: impl FnMut(&Trainer, Option<&EvalSummary>) -> Result<()>,
    ) -> Result<()> {
        for _ in 0..steps {
            match self.train_step(train) {
                Ok(_) => {}
                Err(Error::Numerics(msg)) => {
                    log::warn!("skipping step: {msg}");
                    self.skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            }
            let every = self.config.eval_every;
            let summary = if every > 0 && self.step.is_multiple_of(every) {
                Some(self.evaluate_and_log(train, test)?)
            } else {
                None
            };
            after_step(self, summary.as_ref())?;
        }
        Ok(())
    }

    pub fn hypernet(&self) -> Option<&HypernetParams> {
        self.config.hypernet_enabled.then_some(&self.hyper)
    }

    /// Zero-fine-tuning evaluation; fills the metric columns of the last row.
    pub fn evaluate_and_log(&mut self, train: &TaskDataset, test: Option<&TaskDataset>) -> Result<EvalSummary> {
        let cfg = &self.config;
        let train_subset = train.truncated(cfg.eval_train_tasks);
        let train_report = if train_subset.is_empty() {
            None
        } else {
            Some(evaluate(
                cfg,
                &self.theta,
                self.hypernet(),
                &train_subset,
                0,
                cfg.eval_views,
                cfg.seed,
            )?)
        };
        let test_report = match test {
            Some(t) if !t.is_empty() => Some(evaluate(
                cfg,
                &self.theta,
                self.hypernet(),
                t,
                0,
                cfg.eval_views,
                cfg.seed,
            )?),
            _ => None,
        };
        if let Some(row) = self.log.last_mut() {
            row.psnr_train = train_report.as_ref().map(|r| r.mean_psnr);
            row.psnr_test = test_report.as_ref().map(|r| r.mean_psnr);
            row.ssim_test = test_report.as_ref().map(|r| r.mean_ssim);
        }
        Ok(EvalSummary {
            train: train_report,
            test: test_report,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            theta: self.theta.clone(),
            hyper: self.hyper.clone(),
            adam_theta: self.adam_theta.clone(),
            adam_delta: self.adam_delta.clone(),
            rng: RngSnapshot::capture(&self.rng),
            sampler: self.sampler,
            step: self.step,
            skipped: self.skipped,
            log: self.log.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        Ok(Trainer {
            config: ckpt.config,
            theta: ckpt.theta,
            hyper: ckpt.hyper,
            adam_theta: ckpt.adam_theta,
            adam_delta: ckpt.adam_delta,
            rng: ckpt.rng.restore(),
            sampler: ckpt.sampler,
            step: ckpt.step,
            skipped: ckpt.skipped,
            log: ckpt.log,
        })
    }
}
