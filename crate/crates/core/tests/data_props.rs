mod common;

use std::fs;
use std::path::Path;

use amp_core::data::{load_image_dir, sample_indices, sample_prune_set, synth_dataset, BatchIterator};
use amp_core::eval::{extract_features, knn_classify};
use amp_core::teacher::{train_supervised, TeacherObjective};
use amp_core::{AmpError, DistillConfig, ModelConfig, VitModel};
use image::{Rgb, RgbImage};
use proptest::prelude::*;

fn write_png(path: &Path, side: u32, seed: u32) {
    let img = RgbImage::from_fn(side, side, |x, y| {
        Rgb([
            ((x * 37 + y * 11 + seed * 5) % 256) as u8,
            ((x * y + seed) % 256) as u8,
            (seed * 40 % 256) as u8,
        ])
    });
    img.save(path).unwrap();
}

#[test]
fn image_directory_two_classes() {
    let root = tempfile::tempdir().unwrap();
    for (class, seeds) in [("b_dog", [4, 5, 6]), ("a_cat", [1, 2, 3])] {
        fs::create_dir(root.path().join(class)).unwrap();
        for s in seeds {
            write_png(&root.path().join(class).join(format!("img{s}.png")), 8, s);
        }
    }
    fs::write(root.path().join("a_cat").join("broken.png"), b"not an image").unwrap();
    let load = load_image_dir(root.path(), 8).unwrap();
    assert_eq!(load.dataset.len(), 6);
    assert_eq!(load.dataset.labels.as_deref(), Some(&[0, 0, 0, 1, 1, 1][..]));
    assert_eq!(load.class_names, vec!["a_cat", "b_dog"]);
    assert_eq!(load.skipped, 1);
    assert_eq!(load.dataset.channels(), 3);

    // identity resize: compare against the raw bytes of the first image
    let raw = image::open(&load.paths[0]).unwrap().to_rgb8();
    for (got, want) in load.dataset.images.data()[..8 * 8 * 3].iter().zip(raw.as_raw()) {
        assert!((got - *want as f64 / 255.0).abs() < 1e-6);
    }

    let small = load_image_dir(root.path(), 4).unwrap();
    assert_eq!(small.dataset.image_size(), 4);
    assert!(small.dataset.images.data().iter().all(|v| (0.0..=1.0).contains(v)));

    let again = load_image_dir(root.path(), 8).unwrap();
    assert_eq!(again.dataset.checksum(), load.dataset.checksum());
    let manifest = load.dataset.manifest(&load.paths);
    assert_eq!(manifest.checksum, load.dataset.checksum());
}

#[test]
fn empty_image_directory_is_an_error() {
    let root = tempfile::tempdir().unwrap();
    fs::create_dir(root.path().join("only")).unwrap();
    assert!(matches!(load_image_dir(root.path(), 8), Err(AmpError::Data(_))));
}

#[test]
fn prune_set_sampling_contracts() {
    let d = synth_dataset(2, 10, 8, 1).unwrap();
    let full = sample_prune_set(&d, 20, 7).unwrap();
    assert_eq!(full.ordering, (0..20).collect::<Vec<_>>());
    let a = sample_prune_set(&d, 6, 9).unwrap();
    let b = sample_prune_set(&d, 6, 9).unwrap();
    assert_eq!(a.ordering, b.ordering);
    assert!(a.images.bit_eq(&b.images));
    assert!(matches!(sample_prune_set(&d, 21, 0), Err(AmpError::Parameter(_))));
}

#[test]
fn prune_set_sampling_is_uniform() {
    let (size, n, seeds) = (50usize, 10usize, 1000usize);
    let mut hits = vec![0usize; size];
    for seed in 0..seeds {
        for i in sample_indices(size, n, seed as u64).unwrap() {
            hits[i] += 1;
        }
    }
    let p = n as f64 / size as f64;
    let sigma = (p * (1.0 - p) / seeds as f64).sqrt();
    for (i, &h) in hits.iter().enumerate() {
        let f = h as f64 / seeds as f64;
        assert!((f - p).abs() <= 3.0 * sigma, "index {i}: {f} vs {p} ± {}", 3.0 * sigma);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn batches_visit_every_sample_once(len in 1usize..40, b in 1usize..12, seed in proptest::option::of(0u64..100)) {
        let d = synth_dataset(1, len, 4, 0).unwrap();
        let mut seen: Vec<usize> = BatchIterator::new(&d, b, seed).flat_map(|batch| batch.indices).collect();
        if seed.is_none() {
            prop_assert_eq!(&seen, &(0..len).collect::<Vec<_>>());
        }
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..len).collect::<Vec<_>>());
        let full = BatchIterator::new(&d, b, seed).drop_last().count();
        prop_assert_eq!(full, len / b);
    }
}

#[test]
fn toy_task_is_learnable() {
    let train = synth_dataset(8, 250, 32, 100).unwrap();
    let test = synth_dataset(8, 50, 32, 200).unwrap();
    let cfg = ModelConfig::new(32, 16, 64, 2, 4, 256).with_classes(8);
    let init = VitModel::init_random(cfg, 0).unwrap();
    let tc = DistillConfig {
        epochs: 5,
        warmup_epochs: 1,
        base_lr: 4e-3,
        min_lr: 1e-6,
        batch_size: 32,
        seed: 1,
        ..DistillConfig::default()
    };
    let objective = TeacherObjective {
        spread_weight: 1.0,
        ..TeacherObjective::default()
    };
    let (model, _) = train_supervised(&init, &train, &tc, &objective).unwrap();
    let a = extract_features(&model, &train, 64).unwrap();
    let b = extract_features(&model, &test, 64).unwrap();
    let top1 = knn_classify(&a, &b, 20, 0.07).unwrap().top1;
    assert!(top1 > 90.0, "kNN top-1 {top1}");
}
