use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hyperplanes::autograd::AdamConfig;
use hyperplanes::io::{synthetic_datasets, SyntheticSpec};
use hyperplanes::meta::{adapt_task, fine_tune, EpochSampler, TaskDataset, TrainConfig, Trainer};
use hyperplanes::metrics::psnr;
use hyperplanes::par::ExecPolicy;
use hyperplanes::render::render_image;
use hyperplanes::target::ConditionedField;
use proptest::prelude::*;

fn objects(n: usize) -> TaskDataset {
    let spec = SyntheticSpec {
        objects: n,
        test_objects: 0,
        views: 8,
        resolution: 12,
        oracle_samples: 64,
        ..SyntheticSpec::default()
    };
    synthetic_datasets(&spec, ExecPolicy::Sequential).unwrap().0
}

fn micro() -> TrainConfig {
    TrainConfig {
        policy: ExecPolicy::Sequential,
        eval_every: 0,
        ..TrainConfig::profile("micro").unwrap()
    }
}

fn window_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn shared_weight_training_reduces_the_loss() {
    let data = objects(2);
    let cfg = TrainConfig {
        hypernet_enabled: false,
        theta_adam: AdamConfig::with_lr(5e-3),
        ..micro()
    };
    let mut trainer = Trainer::new(cfg).unwrap();
    trainer.run(&data, None, 200, |_, _| Ok(())).unwrap();
    let losses = trainer.log.losses();
    assert_eq!(losses.len(), 200);
    let (first, last) = (window_mean(&losses[..20]), window_mean(&losses[180..]));
    assert!(last < 0.7 * first, "loss {first:.4} -> {last:.4}");
}

#[test]
fn zero_learning_rate_step_changes_nothing() {
    let data = objects(2);
    let cfg = TrainConfig {
        theta_adam: AdamConfig::with_lr(0.0),
        delta_adam: AdamConfig::with_lr(0.0),
        ..micro()
    };
    let mut trainer = Trainer::new(cfg).unwrap();
    let (theta, hyper) = (trainer.theta.clone(), trainer.hyper.params.clone());
    trainer.train_step(&data).unwrap();
    assert_eq!(trainer.theta, theta);
    assert_eq!(trainer.hyper.params, hyper);
}

proptest! {
    #[test]
    fn every_task_is_drawn_once_per_epoch(seed in any::<u64>(), n in 1usize..20, batch in 1usize..7, epochs in 1usize..5) {
        let mut sampler = EpochSampler::new(seed);
        let mut counts = vec![0usize; n];
        let total = n * epochs;
        let mut drawn = 0;
        while drawn < total {
            let take = batch.min(total - drawn);
            for i in sampler.next_indices(take, n).unwrap() {
                counts[i] += 1;
            }
            drawn += take;
        }
        prop_assert!(counts.iter().all(|&c| c == epochs), "{:?}", counts);
    }
}

#[test]
fn zero_iteration_fine_tuning_is_a_no_op() {
    let data = objects(1);
    let trainer = Trainer::new(micro()).unwrap();
    let theta = trainer.theta.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tuned = fine_tune(
        &trainer.config,
        &data.tasks[0],
        &trainer.theta,
        &trainer.hyper,
        0,
        &mut rng,
    )
    .unwrap();
    assert_eq!(tuned, trainer.hyper);
    let tuned = fine_tune(
        &trainer.config,
        &data.tasks[0],
        &trainer.theta,
        &trainer.hyper,
        5,
        &mut rng,
    )
    .unwrap();
    assert_ne!(tuned.params, trainer.hyper.params);
    let bits = |t: &hyperplanes::target::TargetParams| t.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&trainer.theta), bits(&theta));
}

#[test]
fn fine_tuned_fit_is_tighter_on_support_than_query_views() {
    let data = objects(2);
    let cfg = TrainConfig {
        theta_adam: AdamConfig::with_lr(5e-3),
        delta_adam: AdamConfig::with_lr(1e-3),
        ft_adam: AdamConfig::with_lr(5e-3),
        ..micro()
    };
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    trainer.run(&data, None, 60, |_, _| Ok(())).unwrap();
    let task = &data.tasks[0];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let adapted = adapt_task(&cfg, &trainer.theta, Some(&trainer.hyper), task, 60, &mut rng).unwrap();
    let planes = task.conditioning_planes(cfg.target.n_planes).unwrap();
    let field = ConditionedField {
        params: &adapted,
        planes,
    };
    let render_cfg = cfg.render_config(task.near, task.far, task.background);
    let mean_psnr = |views: &[hyperplanes::planes::ImagePlane]| -> f64 {
        let scores: Vec<f64> = views
            .iter()
            .map(|v| {
                psnr(
                    &render_image(&field, &v.camera, &render_cfg).unwrap().image,
                    &v.pixels,
                    1.0,
                )
                .unwrap()
            })
            .collect();
        window_mean(&scores)
    };
    let (support, query) = (mean_psnr(&task.support), mean_psnr(&task.query));
    assert!(support >= query, "support {support:.2} dB < query {query:.2} dB");
}
