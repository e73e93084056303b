use std::path::Path;

use serde::Serialize;

use hyperplanes::io::{
    generate_synthetic, load_checkpoint, load_dataset, save_checkpoint, write_atomic, write_png, write_sidecar,
    Checkpoint,
};
use hyperplanes::meta::{
    adapt_and_render, median, run_ablation, task_seed, write_sweep_csv, Split, TaskDataset, TrainConfig, Trainer,
};
use hyperplanes::metrics::{MetricReport, ViewMetrics};
use hyperplanes::par;

use crate::config::CliConfig;
use crate::error::CliError;
use crate::VERSION;

pub const RUN_RECORD: &str = "run.toml";
pub const LATEST_CHECKPOINT: &str = "checkpoint.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const RUNLOG: &str = "runlog.csv";

#[derive(Serialize)]
struct RunRecord<'a> {
    version: &'a str,
    command: &'a str,
    config: &'a CliConfig,
}

/// Writes the resolved configuration and version stamp; every command calls
/// this before touching anything else.
pub fn write_run_record(cfg: &CliConfig, command: &str) -> Result<(), CliError> {
    let record = RunRecord {
        version: VERSION,
        command,
        config: cfg,
    };
    let text = toml::to_string(&record).map_err(|e| CliError::Usage(format!("config does not serialize: {e}")))?;
    write_atomic(&cfg.run_dir.join(RUN_RECORD), text.as_bytes())?;
    Ok(())
}

fn train_config(cfg: &CliConfig) -> TrainConfig {
    TrainConfig {
        policy: cfg.policy(),
        ..cfg.train.clone()
    }
}

fn load_split(cfg: &CliConfig, split: Split) -> Result<TaskDataset, CliError> {
    Ok(load_dataset(&cfg.data, split, cfg.policy())?)
}

pub fn gen_synthetic(cfg: &CliConfig) -> Result<(), CliError> {
    write_run_record(cfg, "gen-synthetic")?;
    let index = generate_synthetic(&cfg.synthetic, &cfg.data, cfg.policy())?;
    let test = index.objects.iter().filter(|o| o.split == Split::Test).count();
    log::info!(
        "wrote {} objects ({} held out) to {}",
        index.objects.len(),
        test,
        cfg.data.display()
    );
    Ok(())
}

fn save_log(trainer: &Trainer, run_dir: &Path) -> Result<(), CliError> {
    write_atomic(&run_dir.join(RUNLOG), trainer.log.to_csv().as_bytes())?;
    Ok(())
}

pub fn train(cfg: &CliConfig) -> Result<(), CliError> {
    write_run_record(cfg, "train")?;
    let train = load_split(cfg, Split::Train)?;
    if train.is_empty() {
        return Err(CliError::Usage(format!(
            "{} has no training objects",
            cfg.data.display()
        )));
    }
    let test = load_split(cfg, Split::Test)?;
    let mut trainer = match &cfg.checkpoint {
        Some(path) => {
            let mut t = Trainer::from_checkpoint(load_checkpoint(path)?)?;
            t.config.policy = cfg.policy();
            // the resolved run config sets the target step count
            t.config.steps = cfg.train.steps;
            log::info!("resuming from {} at step {}", path.display(), t.step);
            t
        }
        None => Trainer::new(train_config(cfg))?,
    };
    let total = trainer.config.steps;
    let remaining = total.saturating_sub(trainer.step);
    let epoch = (train.len() as u64)
        .div_ceil(trainer.config.tasks_per_step as u64)
        .max(1);
    let run_dir = cfg.run_dir.clone();
    let mut best = f64::NEG_INFINITY;
    trainer.run(&train, (!test.is_empty()).then_some(&test), remaining, |t, summary| {
        if let Some(psnr) = summary.and_then(|s| s.test.as_ref()).map(|r| r.mean_psnr) {
            log::info!("step {}: test PSNR {psnr:.2} dB", t.step);
            if psnr > best {
                best = psnr;
                save_checkpoint(&t.checkpoint(), &run_dir.join(BEST_CHECKPOINT))?;
            }
        }
        if t.step % epoch == 0 {
            save_checkpoint(&t.checkpoint(), &run_dir.join(LATEST_CHECKPOINT))?;
            write_atomic(&run_dir.join(RUNLOG), t.log.to_csv().as_bytes())?;
            log::info!(
                "step {}/{total}: loss {:.4}",
                t.step,
                t.log.losses().last().copied().unwrap_or(f64::NAN)
            );
        }
        Ok(())
    })?;
    save_checkpoint(&trainer.checkpoint(), &run_dir.join(LATEST_CHECKPOINT))?;
    save_log(&trainer, &run_dir)?;
    if trainer.skipped > 0 {
        log::warn!("{} steps skipped by the divergence guard", trainer.skipped);
    }
    log::info!("trained to step {}; checkpoint in {}", trainer.step, run_dir.display());
    Ok(())
}

struct Loaded {
    ckpt: Checkpoint,
    config: TrainConfig,
    data: TaskDataset,
}

fn load_for_inference(cfg: &CliConfig) -> Result<Loaded, CliError> {
    let ckpt = load_checkpoint(&cfg.checkpoint_path())?;
    // the checkpoint fixes the architecture; inference knobs come from the run config
    let config = TrainConfig {
        policy: cfg.policy(),
        ft_adam: cfg.train.ft_adam,
        ft_rays: cfg.train.ft_rays,
        ..ckpt.config.clone()
    };
    let data = load_split(cfg, cfg.split)?;
    if data.is_empty() {
        return Err(CliError::Usage(format!(
            "{} has no {} objects",
            cfg.data.display(),
            cfg.split.name()
        )));
    }
    Ok(Loaded { ckpt, config, data })
}

fn hyper_of(l: &Loaded) -> Option<&hyperplanes::hypernet::HypernetParams> {
    l.config.hypernet_enabled.then_some(&l.ckpt.hyper)
}

/// Adapts every task at `ft` iterations and writes its renders under `dir`.
fn adapt_all(
    l: &Loaded,
    ft: usize,
    views: usize,
    dir: Option<&Path>,
    objects: &[String],
) -> Result<Vec<ViewMetrics>, CliError> {
    let tasks: Vec<(usize, &hyperplanes::meta::Task)> = l
        .data
        .tasks
        .iter()
        .enumerate()
        .filter(|(_, t)| objects.is_empty() || objects.contains(&t.object_id))
        .collect();
    if tasks.is_empty() {
        return Err(CliError::Usage(format!("none of {objects:?} is in the dataset")));
    }
    let per_task = par::try_map(l.config.policy, &tasks, |&(i, task)| {
        let view_idx: Vec<usize> = (0..views.min(task.query.len())).collect();
        let out = adapt_and_render(
            &l.config,
            &l.ckpt.theta,
            hyper_of(l),
            task,
            ft,
            &view_idx,
            task_seed(l.config.seed, i),
        )?;
        if let Some(dir) = dir {
            for (view_id, image) in &out.images {
                let stem = dir.join(&task.object_id).join(format!("{view_id:03}"));
                write_png(&stem.with_extension("png"), image)?;
                write_sidecar(&stem.with_extension("f32"), image)?;
            }
        }
        Ok(out.metrics)
    })?;
    Ok(per_task.into_iter().flatten().collect())
}

fn ft_list(cfg: &CliConfig) -> Result<&[usize], CliError> {
    if cfg.ft_iters.is_empty() {
        return Err(CliError::Usage("ft_iters is empty".into()));
    }
    Ok(&cfg.ft_iters)
}

/// Single-budget commands take the first entry of `ft_iters`.
fn first_ft(cfg: &CliConfig) -> Result<usize, CliError> {
    let fts = ft_list(cfg)?;
    if fts.len() > 1 {
        log::warn!("using ft_iters = {} only; `adapt` scores every budget", fts[0]);
    }
    Ok(fts[0])
}

pub fn adapt(cfg: &CliConfig) -> Result<(), CliError> {
    write_run_record(cfg, "adapt")?;
    let l = load_for_inference(cfg)?;
    let fts = ft_list(cfg)?;
    let mut columns: Vec<MetricReport> = Vec::with_capacity(fts.len());
    for &ft in fts {
        let dir = cfg.run_dir.join("adapt").join(format!("ft{ft}"));
        let report = MetricReport::from_views(adapt_all(&l, ft, cfg.views(), Some(&dir), &[])?);
        report.save(
            &cfg.run_dir.join(format!("metrics_ft{ft}.json")),
            &cfg.run_dir.join(format!("metrics_ft{ft}.csv")),
        )?;
        log::info!(
            "ft={ft}: mean PSNR {:.2} dB, SSIM {:.4}",
            report.mean_psnr,
            report.mean_ssim
        );
        columns.push(report);
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["object".to_string(), "view_id".to_string()];
    header.extend(fts.iter().map(|ft| format!("psnr_ft{ft}")));
    header.extend(fts.iter().map(|ft| format!("ssim_ft{ft}")));
    let csv_err = |e: csv::Error| CliError::Usage(format!("adapt CSV: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for (row, v) in columns[0].views.iter().enumerate() {
        let mut rec = vec![v.object.clone(), v.view_id.to_string()];
        rec.extend(columns.iter().map(|c| c.views[row].psnr.to_string()));
        rec.extend(columns.iter().map(|c| c.views[row].ssim.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let mut rec = vec!["mean".to_string(), String::new()];
    rec.extend(columns.iter().map(|c| c.mean_psnr.to_string()));
    rec.extend(columns.iter().map(|c| c.mean_ssim.to_string()));
    w.write_record(&rec).map_err(csv_err)?;
    let bytes = w.into_inner().map_err(|e| CliError::Usage(format!("adapt CSV: {e}")))?;
    write_atomic(&cfg.run_dir.join("adapt.csv"), &bytes)?;
    Ok(())
}

pub fn render(cfg: &CliConfig) -> Result<(), CliError> {
    write_run_record(cfg, "render")?;
    let l = load_for_inference(cfg)?;
    let ft = first_ft(cfg)?;
    let dir = cfg.run_dir.join("render");
    let metrics = adapt_all(&l, ft, cfg.views(), Some(&dir), &cfg.objects)?;
    log::info!("rendered {} views to {}", metrics.len(), dir.display());
    Ok(())
}

pub fn eval(cfg: &CliConfig) -> Result<(), CliError> {
    write_run_record(cfg, "eval")?;
    let l = load_for_inference(cfg)?;
    let ft = first_ft(cfg)?;
    let report = MetricReport::from_views(adapt_all(&l, ft, cfg.views(), None, &[])?);
    report.save(&cfg.run_dir.join("metrics.json"), &cfg.run_dir.join("metrics.csv"))?;
    println!(
        "{} views, ft={ft}: mean PSNR {:.3} dB, mean SSIM {:.4}",
        report.views.len(),
        report.mean_psnr,
        report.mean_ssim
    );
    Ok(())
}

pub fn ablate(cfg: &CliConfig) -> Result<(), CliError> {
    write_run_record(cfg, "ablate")?;
    let train = load_split(cfg, Split::Train)?;
    let test = load_split(cfg, Split::Test)?;
    if train.is_empty() || test.is_empty() {
        return Err(CliError::Usage("ablation needs both train and test objects".into()));
    }
    let axis = cfg.ablate.axis;
    let settings = if cfg.ablate.settings.is_empty() {
        axis.default_settings()
    } else {
        cfg.ablate.settings.clone()
    };
    let steps = cfg.ablate.steps.unwrap_or(cfg.train.steps);
    let rows = run_ablation(
        &train_config(cfg),
        axis,
        &settings,
        &cfg.ablate.seeds,
        steps,
        &train,
        &test,
        cfg.views(),
    )?;
    let mut bytes = Vec::new();
    write_sweep_csv(&rows, &mut bytes)?;
    let path = cfg.run_dir.join(format!("ablate_{}.csv", axis.name()));
    write_atomic(&path, &bytes)?;
    for setting in &settings {
        let psnr: Vec<f64> = rows
            .iter()
            .filter(|r| &r.setting == setting && r.metric == "psnr_test")
            .map(|r| r.value)
            .collect();
        println!(
            "{axis} = {setting}: median test PSNR {:.3} dB over {} seeds",
            median(&psnr),
            psnr.len()
        );
    }
    log::info!("wrote {}", path.display());
    Ok(())
}
