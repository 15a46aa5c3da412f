use candle_core::{Device, Tensor};
use dva_core::metrics::{consistency_from_features, ms_ssim, mse, ssim};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(seed: u64, c: usize, h: usize, w: usize) -> (Tensor, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (
        Tensor::from_vec(v.clone(), (1, c, h, w), &Device::Cpu).unwrap(),
        v,
    )
}

/// Direct 2-D windowed SSIM: weights built as a full 11x11 Gaussian and
/// every statistic summed explicitly per window position.
fn ssim_direct(a: &[f64], b: &[f64], c: usize, h: usize, w: usize) -> f64 {
    let k = 11;
    let sigma: f64 = 1.5;
    let mut weights = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            weights[i * k + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for ch in 0..c {
        let px = |img: &[f64], y: usize, x: usize| (img[ch * h * w + y * w + x] + 1.0) / 2.0;
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let g = weights[i * k + j];
                        let (u, v) = (px(a, y0 + i, x0 + j), px(b, y0 + i, x0 + j));
                        mx += g * u;
                        my += g * v;
                        xx += g * u * u;
                        yy += g * v * v;
                        xy += g * u * v;
                    }
                }
                let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    acc / count as f64
}

#[test]
fn ssim_matches_direct_window_sum() {
    for (seed, h, w) in [(1, 11, 11), (2, 16, 16), (3, 32, 20)] {
        let (a, va) = image(seed, 3, h, w);
        let (b0, _) = image(seed + 100, 3, h, w);
        // Correlated pair so SSIM sits well away from zero.
        let b = ((&a * 0.7).unwrap() + (b0 * 0.3).unwrap()).unwrap();
        let vb = b.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let expected = ssim_direct(&va, &vb, 3, h, w);
        let got = ssim(&a, &b).unwrap();
        assert!(
            (got - expected).abs() < 1e-12,
            "{h}x{w}: {got} vs {expected}"
        );
    }
}

#[test]
fn mse_uses_unit_scale() {
    let a = Tensor::full(-1f64, (1, 3, 4, 4), &Device::Cpu).unwrap();
    let b = Tensor::full(1f64, (1, 3, 4, 4), &Device::Cpu).unwrap();
    assert_eq!(mse(&a, &b).unwrap(), 1.0);
    let c = Tensor::zeros((1, 3, 4, 4), candle_core::DType::F64, &Device::Cpu).unwrap();
    assert_eq!(mse(&a, &c).unwrap(), 0.25);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in 0u64..10_000, mix in 0.0f64..1.0) {
        let (a, _) = image(seed, 3, 16, 16);
        let (n, _) = image(seed ^ 0xabc, 3, 16, 16);
        let b = ((&a * mix).unwrap() + (n * (1.0 - mix)).unwrap()).unwrap();
        let ab = ssim(&a, &b).unwrap();
        prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12 && ab >= -1.0 - 1e-12);
        let ms = ms_ssim(&a, &b).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ms));
        prop_assert!((ms - ms_ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn consistency_of_unchanged_features_is_one(seed in 0u64..10_000, n in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..8).map(|_| rng.gen_range(0.1..1.0)).collect())
            .collect();
        let r = consistency_from_features(&feats, &feats).unwrap();
        prop_assert!((r.tl_id - 1.0).abs() < 1e-12);
        prop_assert!((r.tg_id - 1.0).abs() < 1e-12);
        prop_assert_eq!(r.adjacent.len(), n - 1);
        prop_assert_eq!(r.all_pairs.len(), n * (n - 1) / 2);
    }
}
