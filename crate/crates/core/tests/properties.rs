use candle_core::{DType, Device, Tensor};
use dva_core::config::FlatConfig;
use dva_core::ddim::StepSchedule;
use dva_core::latent_edit::{edit_identity_vec, fit_attribute_classifier, ClassifierFit};
use dva_core::pipeline::paste_back;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn toy_direction(seed: u64, dim: usize) -> dva_core::latent_edit::EditDirection {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for i in 0..40 {
        let label = i % 2 == 0;
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        v[0] += if label { 2.0 } else { -2.0 };
        features.push(unit(v));
        labels.push(label);
    }
    fit_attribute_classifier(
        "toy",
        &features,
        &labels,
        &ClassifierFit {
            iterations: 200,
            ..Default::default()
        },
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn edited_identity_stays_on_the_sphere(seed in 0u64..1000, s in -5.0f64..5.0) {
        let dir = toy_direction(seed % 7, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = unit((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let e = edit_identity_vec(&z, &dir, s).unwrap();
        let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-12);
        if s > 0.0 {
            prop_assert!(dir.logit(&e).unwrap() >= dir.logit(&z).unwrap() - 1e-9);
        }
    }

    #[test]
    fn paste_back_is_a_per_pixel_blend(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |c: usize| {
            let v: Vec<f32> = (0..2 * c * 36).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::from_vec(v, (2, c, 6, 6), &Device::Cpu).unwrap()
        };
        let (orig, edit) = (t(3), t(3));
        let mask = t(1).ge(0.0).unwrap().to_dtype(DType::F32).unwrap();
        let out = paste_back(&orig, &edit, &mask).unwrap();
        let (o, e, m, r) = (
            orig.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            edit.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            mask.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            out.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
        );
        for i in 0..r.len() {
            let (b, p) = (i / (3 * 36), i % 36);
            let want = if m[b * 36 + p] == 1.0 { e[i] } else { o[i] };
            prop_assert_eq!(r[i], want);
        }
    }

    #[test]
    fn evenly_spaced_schedules_are_strictly_increasing(total in 1usize..2000, frac in 0.0f64..1.0) {
        let count = 1 + ((total - 1) as f64 * frac) as usize;
        let s = StepSchedule::evenly_spaced(total, count).unwrap();
        let steps = s.steps();
        prop_assert_eq!(*steps.last().unwrap(), total);
        prop_assert!(steps.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(steps[0] >= 1);
        let pairs: Vec<_> = s.pairs().collect();
        prop_assert_eq!(pairs[0].0, 0);
        prop_assert!(pairs.windows(2).all(|w| w[0].1 == w[1].0));
    }

    #[test]
    fn flat_config_text_round_trips(entries in proptest::collection::btree_map("[a-z][a-z0-9_.]{0,10}", "[A-Za-z0-9_.,-]{0,12}", 0..8)) {
        let mut c = FlatConfig::default();
        for (k, v) in &entries {
            c.set(k, v);
        }
        let back = FlatConfig::parse(&c.to_text()).unwrap();
        for (k, v) in &entries {
            prop_assert_eq!(back.get_str(k), Some(v.as_str()));
        }
        prop_assert_eq!(back.len(), entries.len());
    }
}
