use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rna_core::data::synthetic::ToySpec;
use rna_core::data::{
    assign_class_groups, empirical_prior, make_long_tail_counts, BatchStream, ImageShape, LongTailSpec, TrainingBatch,
};
use rna_core::model::{argmax_rows, ModelBundle, ModelConfig};
use rna_core::nn::{BackboneConfig, Matrix, Mode};

fn lt(c: usize, max: usize, ratio: f64) -> LongTailSpec {
    LongTailSpec {
        num_classes: c,
        max_count: max,
        imbalance_ratio: ratio,
        profile: Default::default(),
        seed: 0,
    }
}

fn tiny() -> ModelConfig {
    let mut cfg = ModelConfig::small(ImageShape::new(2, 4, 4), 3);
    cfg.backbone = BackboneConfig::SmallCnn {
        channels: vec![4, 6],
        strides: vec![1, 2],
    };
    cfg
}

fn pixels(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * 32).map(|_| rng.random_range(-1.0..1.0)).collect()
}

proptest! {
    #[test]
    fn long_tail_counts_decay(c in 2usize..30, max in 1usize..5000, ratio in 1.0f64..200.0) {
        let counts = make_long_tail_counts(&lt(c, max, ratio)).unwrap();
        prop_assert_eq!(counts.len(), c);
        prop_assert_eq!(counts[0], max);
        prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(counts.iter().all(|&n| n >= 1));
        let tail = (max as f64 / ratio).floor().max(1.0) as usize;
        prop_assert!(counts[c - 1].abs_diff(tail) <= 1);
    }

    #[test]
    fn steeper_imbalance_never_grows_the_tail(c in 2usize..30, max in 1usize..5000, r1 in 1.0f64..200.0, r2 in 1.0f64..200.0) {
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        let a = make_long_tail_counts(&lt(c, max, lo)).unwrap();
        let b = make_long_tail_counts(&lt(c, max, hi)).unwrap();
        prop_assert!(b[c - 1] <= a[c - 1]);
        prop_assert!(b.iter().sum::<usize>() <= a.iter().sum::<usize>());
    }

    #[test]
    fn groups_partition_the_classes(counts in prop::collection::vec(1usize..1000, 3..40)) {
        let g = assign_class_groups(&counts).unwrap();
        let mut all: Vec<usize> = g.many.iter().chain(&g.medium).chain(&g.few).copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..counts.len()).collect::<Vec<_>>());
        let min_many = g.many.iter().map(|&k| counts[k]).min().unwrap();
        let max_few = g.few.iter().map(|&k| counts[k]).max().unwrap();
        prop_assert!(min_many >= max_few);
        prop_assert_eq!(g.many.len(), counts.len().div_ceil(3));
    }

    #[test]
    fn empirical_prior_is_a_distribution(counts in prop::collection::vec(1usize..1000, 1..20)) {
        let p = empirical_prior(&counts).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn argmax_survives_positive_scaling(z in prop::collection::vec(-5.0f64..5.0, 12), s in 0.01f64..100.0) {
        let m = Matrix::from_vec(4, 3, z.clone());
        let scaled = Matrix::from_vec(4, 3, z.iter().map(|v| v * s).collect());
        prop_assert_eq!(argmax_rows(&m), argmax_rows(&scaled));
    }
}

#[test]
fn prediction_matches_brute_force_dot_products() {
    let m = ModelBundle::<f64>::new(tiny(), vec![0.5, 0.3, 0.2], 4).unwrap();
    let x = pixels(6, 1);
    let out = m.forward_eval(&x, 6).unwrap();
    let (d, c) = (out.features.cols, 3);
    let w = &m.classifier.weight.value;
    let brute: Vec<usize> = out
        .features
        .iter_rows()
        .map(|f| {
            let z: Vec<f64> = (0..c).map(|k| (0..d).map(|j| f[j] * w[j * c + k]).sum()).collect();
            (0..c).fold(0, |best, k| if z[k] > z[best] { k } else { best })
        })
        .collect();
    assert_eq!(m.predict(&x, 6).unwrap(), brute);
}

#[test]
fn repeated_train_forwards_advance_the_ema_twice() {
    let mut m = ModelBundle::<f64>::new(tiny(), vec![0.5, 0.3, 0.2], 2).unwrap();
    let x = pixels(5, 2);
    let (a, _) = m.forward_rows(&x, 5, 5, Mode::Train).unwrap();
    let after_one = m.running_stats();
    let (b, _) = m.forward_rows(&x, 5, 5, Mode::Train).unwrap();
    assert_eq!(a.features, b.features);
    let after_two = m.running_stats();
    assert_ne!(after_one, after_two);

    // The first batch norm sees the same input both times. From the zero start
    // r₁ = m·μ, so r₂ = (1 − m)·r₁ + m·μ = (1 − m)·r₁ + r₁.
    let mut m1 = ModelBundle::<f64>::new(tiny(), vec![0.5, 0.3, 0.2], 2).unwrap();
    m1.forward_rows(&x, 5, 5, Mode::Train).unwrap();
    let r1 = m1.batch_norms()[0].running_mean.clone();
    let bn = &m.batch_norms()[0];
    let mom = bn.config.momentum;
    for (&r2, &r1) in bn.running_mean.iter().zip(&r1) {
        assert!(((1.0 - mom) * r1 + r1 - r2).abs() < 1e-12);
    }
}

#[test]
fn union_batch_mean_at_the_first_batch_norm() {
    let cfg = tiny();
    let mut a = ModelBundle::<f64>::new(cfg.clone(), vec![0.5, 0.3, 0.2], 3).unwrap();
    let mut b = a.clone();
    let mut c = a.clone();
    let (id, ood) = (pixels(4, 7), pixels(4, 8));
    let mut both = id.clone();
    both.extend_from_slice(&ood);
    a.forward_rows(&both, 8, 4, Mode::Train).unwrap();
    b.forward_rows(&id, 4, 4, Mode::Train).unwrap();
    c.forward_rows(&ood, 4, 4, Mode::Train).unwrap();
    let first = |m: &ModelBundle<f64>| m.batch_norms()[0].running_mean.clone();
    for ((u, i), o) in first(&a).iter().zip(first(&b)).zip(first(&c)) {
        assert!((u - 0.5 * (i + o)).abs() < 1e-12);
    }
}

#[test]
fn toy_data_is_reproducible_and_disjoint() {
    let spec = ToySpec::default();
    let a = spec.build::<f32>().unwrap();
    let b = spec.build::<f32>().unwrap();
    assert_eq!(a.id_train.images.pixels(), b.id_train.images.pixels());
    assert_eq!(a.train_counts(), make_long_tail_counts(&spec.long_tail()).unwrap());
    assert_eq!(a.id_test.class_counts(10), vec![spec.test_per_class; 10]);
    for f in &spec.test_families {
        assert!(!spec.aux_families.contains(f));
        assert_eq!(a.ood_tests[f.name()].len(), spec.test_size);
    }
    let other = ToySpec { seed: 1, ..spec }.build::<f32>().unwrap();
    assert_ne!(a.id_train.images.pixels(), other.id_train.images.pixels());
}

#[test]
fn batches_keep_the_ratio_and_drop_the_remainder() {
    let spec = ToySpec {
        max_count: 100,
        ..ToySpec::default()
    };
    let data = spec.build::<f32>().unwrap();
    let stream = BatchStream::new(&data.id_train, Some(&data.aux_ood), 32, 16, 0, 1).unwrap();
    let batches: Vec<TrainingBatch<f32>> = stream.epoch(0).unwrap();
    assert_eq!(batches.len(), data.id_train.len() / 32);
    assert!(batches.iter().all(|b| b.b_id() == 32 && b.b_ood() == 16));
    assert_eq!(stream.epoch(3).unwrap(), stream.epoch(3).unwrap());
}
