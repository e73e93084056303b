//! Train-then-evaluate trials and sweeps over one configuration axis.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::par;
use crate::target::Architecture;

use super::adapt::evaluate;
use super::{TaskDataset, TrainConfig, Trainer};

/// A finished training run and its held-out scores.
#[derive(Debug, Clone)]
pub struct Trial {
    pub trainer: Trainer,
    /// `(fine-tuning iterations, report)` in the requested order.
    pub reports: Vec<(usize, MetricReport)>,
    pub train_seconds: f64,
}

impl Trial {
    pub fn report(&self, ft_iters: usize) -> Option<&MetricReport> {
        self.reports.iter().find(|(ft, _)| *ft == ft_iters).map(|(_, r)| r)
    }

    /// Mean of the last `window` training losses.
    pub fn final_loss(&self, window: usize) -> f64 {
        let losses = self.trainer.log.losses();
        let tail = &losses[losses.len().saturating_sub(window)..];
        if tail.is_empty() {
            f64::NAN
        } else {
            tail.iter().sum::<f64>() / tail.len() as f64
        }
    }
}

/// Meta-trains `cfg` for `steps` steps, then scores the first `views` query
/// views of every test task at each fine-tuning budget.
pub fn run_trial(
    cfg: &TrainConfig,
    train: &TaskDataset,
    test: &TaskDataset,
    steps: u64,
    ft_iters: &[usize],
    views: usize,
) -> Result<Trial> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let start = Instant::now();
    trainer.run(train, None, steps, |_, _| Ok(()))?;
    let train_seconds = start.elapsed().as_secs_f64();
    let mut reports = Vec::with_capacity(ft_iters.len());
    for &ft in ft_iters {
        let report = evaluate(cfg, &trainer.theta, trainer.hypernet(), test, ft, views, cfg.seed)?;
        reports.push((ft, report));
    }
    Ok(Trial {
        trainer,
        reports,
        train_seconds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    Architecture,
    K,
    N,
    UpdateMask,
    HypernetInputs,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] = [
        AblationAxis::Architecture,
        AblationAxis::K,
        AblationAxis::N,
        AblationAxis::UpdateMask,
        AblationAxis::HypernetInputs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Architecture => "architecture",
            AblationAxis::K => "k",
            AblationAxis::N => "n",
            AblationAxis::UpdateMask => "update-mask",
            AblationAxis::HypernetInputs => "hypernet-inputs",
        }
    }

    pub fn default_settings(self) -> Vec<String> {
        let s: &[&str] = match self {
            AblationAxis::Architecture => &["nerf", "multiplane", "pointmultiplane"],
            AblationAxis::K => &["1", "3", "5", "10"],
            AblationAxis::N => &["5", "10", "25"],
            AblationAxis::UpdateMask => &["last", "all"],
            AblationAxis::HypernetInputs => &["images", "images+dirs", "images+weights", "images+dirs+weights"],
        };
        s.iter().map(|v| v.to_string()).collect()
    }

    /// `base` with this axis set to `setting`.
    pub fn apply(self, base: &TrainConfig, setting: &str) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        let count = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::contract(format!("{}: expected a count, got {s:?}", self.name())))
        };
        match self {
            AblationAxis::Architecture => cfg.target.arch = setting.parse::<Architecture>()?,
            AblationAxis::K => cfg.k = count(setting)?,
            AblationAxis::N => {
                cfg.target.n_planes = count(setting)?;
                cfg.k = cfg.k.min(cfg.target.n_planes);
            }
            AblationAxis::UpdateMask => cfg.update_mask = setting.to_string(),
            AblationAxis::HypernetInputs => {
                let mut parts: Vec<&str> = setting.split('+').map(str::trim).collect();
                if parts.first() != Some(&"images") {
                    return Err(Error::contract(format!(
                        "hypernet-inputs {setting:?} must start with \"images\""
                    )));
                }
                parts.remove(0);
                cfg.hypernet.use_dirs = false;
                cfg.hypernet.use_weights = false;
                for p in parts {
                    match p {
                        "dirs" => cfg.hypernet.use_dirs = true,
                        "weights" => cfg.hypernet.use_weights = true,
                        other => {
                            return Err(Error::contract(format!(
                                "unknown hypernet input {other:?} (expected dirs or weights)"
                            )))
                        }
                    }
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<&str> = AblationAxis::ALL.iter().map(|a| a.name()).collect();
            Error::contract(format!(
                "unknown ablation axis {s:?} (expected one of {})",
                names.join(", ")
            ))
        })
    }
}

/// One long-format sweep record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub setting: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

pub fn write_sweep_csv(rows: &[SweepRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)
            .map_err(|e| Error::contract(format!("sweep CSV: {e}")))?;
    }
    w.flush()
        .map_err(|e| Error::io(std::path::Path::new("<sweep csv>"), e))?;
    Ok(())
}

/// Every `(setting, seed)` pair trained for `steps` steps and scored with
/// zero fine-tuning. Rows come back in setting-major, seed-minor order.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    base: &TrainConfig,
    axis: AblationAxis,
    settings: &[String],
    seeds: &[u64],
    steps: u64,
    train: &TaskDataset,
    test: &TaskDataset,
    views: usize,
) -> Result<Vec<SweepRow>> {
    let mut jobs = Vec::with_capacity(settings.len() * seeds.len());
    for setting in settings {
        let cfg = axis.apply(base, setting)?;
        for &seed in seeds {
            jobs.push((setting.clone(), TrainConfig { seed, ..cfg.clone() }));
        }
    }
    let per_job = par::try_map(base.policy, &jobs, |(setting, cfg)| {
        let trial = run_trial(cfg, train, test, steps, &[0], views)?;
        let report = trial.report(0).expect("ft=0 requested");
        let row = |metric: &str, value: f64| SweepRow {
            axis: axis.name().to_string(),
            setting: setting.clone(),
            seed: cfg.seed,
            metric: metric.to_string(),
            value,
        };
        Ok(vec![
            row("psnr_test", report.mean_psnr),
            row("ssim_test", report.mean_ssim),
            row("final_loss", trial.final_loss(50)),
            row("skipped_steps", trial.trainer.skipped as f64),
            row("train_seconds", trial.train_seconds),
        ])
    })?;
    Ok(per_job.into_iter().flatten().collect())
}

/// Median, averaging the middle pair for even counts; NaN when empty.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}
