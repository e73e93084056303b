use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hyperplanes::metrics::{psnr, ssim};
use hyperplanes::raster::Raster;

fn noise(seed: u64, size: usize) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Raster::new(size, size, (0..size * size * 3).map(|_| rng.gen()).collect()).unwrap()
}

/// `base` moved toward `other` by `t`.
fn blend(base: &Raster, other: &Raster, t: f64) -> Raster {
    let data = base
        .data()
        .iter()
        .zip(other.data())
        .map(|(a, b)| a + t * (b - a))
        .collect();
    Raster::new(base.width(), base.height(), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_symmetric(a in any::<u64>(), b in any::<u64>(), size in 11usize..20) {
        let (x, y) = (noise(a, size), noise(b, size));
        prop_assert!((psnr(&x, &y, 1.0).unwrap() - psnr(&y, &x, 1.0).unwrap()).abs() < 1e-12);
        prop_assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_lies_in_its_range(a in any::<u64>(), b in any::<u64>(), t in 0.0f64..1.0) {
        let (x, y) = (noise(a, 16), noise(b, 16));
        let s = ssim(&x, &blend(&x, &y, t)).unwrap();
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&s), "{}", s);
    }

    #[test]
    fn larger_errors_score_lower(a in any::<u64>(), b in any::<u64>(), t in 0.05f64..0.9) {
        let (x, y) = (noise(a, 16), noise(b, 16));
        let near = blend(&x, &y, t);
        let far = blend(&x, &y, (t + 0.1).min(1.0));
        prop_assert!(psnr(&x, &near, 1.0).unwrap() > psnr(&x, &far, 1.0).unwrap());
        prop_assert!(ssim(&x, &near).unwrap() > ssim(&x, &far).unwrap());
    }
}
