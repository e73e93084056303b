use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hyperplanes::geometry::{importance_depths, stratified_samples, Jitter, Ray, SampleSet};
use hyperplanes::render::{composite, RadianceSample};

fn axis_ray(near: f64, far: f64) -> Ray {
    Ray::new(Vector3::zeros(), Vector3::z(), near, far).unwrap()
}

#[test]
fn stratified_depths_average_to_the_interval_midpoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ray = axis_ray(2.0, 6.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for _ in 0..2000 {
        let set = stratified_samples(&ray, 16, &mut Jitter::Random(&mut rng)).unwrap();
        total += set.depths().iter().sum::<f64>();
        count += set.len();
    }
    let mean = total / count as f64;
    assert!((mean - 4.0).abs() < 0.05, "mean depth {mean}");
}

#[test]
fn importance_draws_concentrate_in_the_weighted_bin() {
    let coarse = SampleSet::from_depths(vec![2.0, 3.0, 4.0, 5.0], 6.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draws = importance_depths(&coarse, &[0.0, 1.0, 0.0, 0.0], 4000, &mut Jitter::Random(&mut rng)).unwrap();
    let inside = draws.iter().filter(|t| (3.0..4.0).contains(*t)).count();
    assert!(
        inside as f64 >= 0.95 * draws.len() as f64,
        "{inside} of {}",
        draws.len()
    );
}

#[test]
fn uniform_weights_fill_bins_evenly() {
    let bins = 8;
    let coarse = SampleSet::from_depths((0..bins).map(|i| 2.0 + 0.5 * i as f64).collect(), 6.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 16_000;
    let draws = importance_depths(&coarse, &vec![1.0; bins], n, &mut Jitter::Random(&mut rng)).unwrap();
    let mut hist = vec![0usize; bins];
    for t in draws {
        hist[(((t - 2.0) / 0.5) as usize).min(bins - 1)] += 1;
    }
    // binomial spread of each bin count
    let p = 1.0 / bins as f64;
    let (mean, sd) = (n as f64 * p, (n as f64 * p * (1.0 - p)).sqrt());
    for (i, &c) in hist.iter().enumerate() {
        assert!((c as f64 - mean).abs() <= 3.0 * sd, "bin {i}: {c} vs {mean} ± {sd:.1}");
    }
}

proptest! {
    #[test]
    fn weights_and_final_transmittance_partition_unity(
        seed in any::<u64>(),
        n in 2usize..96,
        near in 0.0f64..3.0,
        length in 0.05f64..8.0,
        scale in 0.0f64..200.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ray = axis_ray(near, near + length);
        let set = stratified_samples(&ray, n, &mut Jitter::Random(&mut rng)).unwrap();
        let samples: Vec<RadianceSample> = (0..n)
            .map(|_| RadianceSample { rgb: [rng.gen(), rng.gen(), rng.gen()], sigma: scale * rng.gen::<f64>().powi(3) })
            .collect();
        let px = composite(&samples, &set, [1.0, 1.0, 1.0]).unwrap();
        let total: f64 = px.weights.iter().sum::<f64>() + px.t_final;
        prop_assert!((total - 1.0).abs() <= 1e-9, "sum {total}");
        prop_assert!(px.weights.iter().all(|w| *w >= 0.0));
        prop_assert!(px.color.iter().all(|c| (0.0..=1.0 + 1e-12).contains(c)));
    }

    #[test]
    fn stratified_samples_are_sorted_and_stay_in_range(seed in any::<u64>(), n in 2usize..64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ray = axis_ray(2.0, 6.0);
        let set = stratified_samples(&ray, n, &mut Jitter::Random(&mut rng)).unwrap();
        prop_assert!(set.depths().windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(set.depths().iter().all(|t| (2.0..=6.0).contains(t)));
        let span: f64 = set.deltas().iter().sum();
        prop_assert!((set.depths()[0] + span - 6.0).abs() < 1e-12);
    }
}
