mod common;

use amp_core::data::synth_dataset;
use amp_core::distill::{distill_loss, train, train_with_hook};
use amp_core::optim::lr_at;
use amp_core::pruner::apply_surgery;
use amp_core::{AmpError, DistillConfig, ModelConfig, NeuronRanking, PrunePlan, Tape, Tensor, VitModel};
use common::{random_tensor, rng};
use proptest::prelude::*;
use rand::Rng;

fn loss_of(tc: &Tensor, tp: &Tensor, sc: &Tensor, sp: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let v: Vec<_> = [tc, tp, sc, sp].iter().map(|t| tape.constant((*t).clone())).collect();
    let l = distill_loss(&mut tape, v[0], v[1], v[2], v[3]).unwrap();
    tape.value(l).item().unwrap()
}

#[test]
fn loss_matches_per_sample_formula() {
    let mut r = rng(1);
    let (b, n, c) = (3, 4, 5);
    let tc = random_tensor(&[b, c], &mut r);
    let sc = random_tensor(&[b, c], &mut r);
    let tp = random_tensor(&[b, n, c], &mut r);
    let sp = random_tensor(&[b, n, c], &mut r);
    let mut want = 0.0;
    for i in 0..b {
        let mut cls = 0.0;
        for j in 0..c {
            cls += (tc.data()[i * c + j] - sc.data()[i * c + j]).powi(2);
        }
        let mut patch = 0.0;
        for t in 0..n {
            for j in 0..c {
                let at = (i * n + t) * c + j;
                patch += (tp.data()[at] - sp.data()[at]).powi(2);
            }
        }
        want += cls / c as f64 + patch / (n * c) as f64;
    }
    want /= b as f64;
    assert!((loss_of(&tc, &tp, &sc, &sp) - want).abs() < 1e-12);
}

#[test]
fn hand_cases() {
    let zc = Tensor::zeros(&[1, 4]);
    let zp = Tensor::zeros(&[1, 2, 4]);
    assert_eq!(loss_of(&zc, &zp, &zc, &zp), 0.0);
    assert_eq!(loss_of(&zc, &zp, &Tensor::ones(&[1, 4]), &zp), 1.0);
}

#[test]
fn mismatched_shapes_are_a_contract_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 4]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let p = tape.constant(Tensor::zeros(&[2, 1, 4]));
    assert!(matches!(
        distill_loss(&mut tape, a, p, b, p),
        Err(AmpError::Contract(_))
    ));
}

fn model(blocks: usize, hidden: usize, seed: u64) -> VitModel {
    let cfg = ModelConfig::new(16, 8, 16, blocks, 2, hidden);
    let mut m = VitModel::init_random(cfg, seed).unwrap();
    let mut r = rng(seed + 50);
    for t in m.tensors_mut() {
        for v in t.data_mut() {
            *v += r.gen_range(-0.1..0.1);
        }
    }
    m
}

fn small_config() -> DistillConfig {
    DistillConfig {
        epochs: 3,
        warmup_epochs: 1,
        base_lr: 2e-3,
        min_lr: 1e-6,
        batch_size: 8,
        seed: 5,
        ..DistillConfig::default()
    }
}

fn assert_same_weights(a: &VitModel, b: &VitModel) {
    assert_eq!(a.config, b.config);
    for (x, y) in a.tensors().iter().zip(b.tensors()) {
        assert!(x.bit_eq(y));
    }
}

#[test]
fn keep_all_student_is_a_fixed_point() {
    let teacher = model(2, 16, 1);
    let d = synth_dataset(4, 5, 16, 2).unwrap();
    let (student, log) = train(&teacher, &teacher, &d, &small_config()).unwrap();
    assert_eq!(log.len(), 3 * 3);
    assert!(log.iter().all(|r| r.loss == 0.0));
    assert_same_weights(&student, &teacher);
}

#[test]
fn zero_epochs_leave_the_student_unchanged() {
    let teacher = model(2, 16, 2);
    let student = model(2, 16, 3);
    let d = synth_dataset(4, 2, 16, 2).unwrap();
    let cfg = DistillConfig {
        epochs: 0,
        warmup_epochs: 0,
        ..small_config()
    };
    let (out, log) = train(&student, &teacher, &d, &cfg).unwrap();
    assert!(log.is_empty());
    assert_same_weights(&out, &student);
}

#[test]
fn training_is_deterministic_and_leaves_the_teacher_alone() {
    let teacher = model(2, 16, 4);
    let frozen = teacher.clone();
    let student = model(2, 16, 5);
    let d = synth_dataset(4, 5, 16, 3).unwrap();
    let mut epochs_seen = Vec::new();
    let (a, la) = train_with_hook(&student, &teacher, &d, &small_config(), &mut |e, _| {
        epochs_seen.push(e);
        Ok(())
    })
    .unwrap();
    let (b, lb) = train(&student, &teacher, &d, &small_config()).unwrap();
    assert_eq!(epochs_seen, vec![0, 1, 2]);
    assert_same_weights(&a, &b);
    assert_eq!(la, lb);
    assert_same_weights(&teacher, &frozen);
    assert!(la.iter().all(|r| r.loss.is_finite() && r.loss >= 0.0));
    let other = DistillConfig {
        seed: 6,
        ..small_config()
    };
    let (c, _) = train(&student, &teacher, &d, &other).unwrap();
    assert!(c.tensors().iter().zip(a.tensors()).any(|(x, y)| !x.bit_eq(y)));
}

#[test]
fn nan_loss_aborts_with_step() {
    let teacher = model(2, 16, 6);
    let mut student = teacher.clone();
    student.cls_token.data_mut()[0] = f64::NAN;
    let d = synth_dataset(4, 2, 16, 4).unwrap();
    match train(&student, &teacher, &d, &small_config()) {
        Err(AmpError::NumericFailure { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected numeric failure, got {other:?}"),
    }
}

#[test]
fn schedule_landmarks() {
    let cfg = DistillConfig {
        epochs: 10,
        warmup_epochs: 1,
        base_lr: 5e-5,
        min_lr: 1e-7,
        batch_size: 512,
        ..DistillConfig::default()
    };
    let spe = 20;
    let peak = 5e-5 * 2.0;
    assert_eq!(lr_at(&cfg, 0, spe), 0.0);
    assert!((lr_at(&cfg, 20, spe) - peak).abs() < 1e-18);
    assert!((lr_at(&cfg, 199, spe) - 1e-7).abs() < 1e-18);
    // decay covers steps 20..=199; its midpoint is step 109.5, so average the neighbours' cosine phases
    let mid = |s: usize| {
        let frac = (s - 20) as f64 / 179.0;
        1e-7 + 0.5 * (peak - 1e-7) * (1.0 + (std::f64::consts::PI * frac).cos())
    };
    for s in [20, 64, 109, 110, 150, 199] {
        assert!((lr_at(&cfg, s, spe) - mid(s)).abs() < 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_stays_between_zero_and_peak(epochs in 2usize..12, spe in 1usize..50, base in 1e-6f64..1e-2, bs in 1usize..1024) {
        let cfg = DistillConfig { epochs, warmup_epochs: 1, base_lr: base, min_lr: 0.0, batch_size: bs, ..DistillConfig::default() };
        let peak = cfg.peak_lr();
        let total = epochs * spe;
        let mut prev = f64::NEG_INFINITY;
        for s in 0..total {
            let lr = lr_at(&cfg, s, spe);
            prop_assert!((0.0..=peak * (1.0 + 1e-12)).contains(&lr));
            if s <= spe {
                prop_assert!(lr >= prev);
            } else {
                prop_assert!(lr <= prev + 1e-18);
            }
            prev = lr;
        }
        // continuity at the boundary: one warmup step below the peak at most
        let gap = (lr_at(&cfg, spe, spe) - lr_at(&cfg, spe - 1, spe)).abs();
        prop_assert!(gap <= peak / spe as f64 + 1e-15);
    }
}

#[test]
fn toy_run_converges() {
    let cfg = ModelConfig::new(32, 16, 64, 2, 4, 256);
    let mut teacher = VitModel::init_random(cfg, 11).unwrap();
    let mut r = rng(12);
    for t in teacher.tensors_mut() {
        for v in t.data_mut() {
            *v += r.gen_range(-0.05..0.05);
        }
    }
    let ranking = NeuronRanking {
        order: vec![(0..256).collect(), (0..256).collect()],
    };
    let plan = PrunePlan::uniform(&ranking, 2 * 154).unwrap();
    let student = apply_surgery(&teacher, &plan).unwrap();
    let d = synth_dataset(8, 250, 32, 13).unwrap();
    let dc = DistillConfig {
        epochs: 10,
        warmup_epochs: 1,
        base_lr: 4e-3,
        min_lr: 1e-6,
        batch_size: 32,
        seed: 0,
        ..DistillConfig::default()
    };
    let (_, log) = train(&student, &teacher, &d, &dc).unwrap();
    let spe = log.len() / 10;
    let first = log[..spe].iter().map(|r| r.loss).sum::<f64>() / spe as f64;
    let last = log[log.len() - spe..].iter().map(|r| r.loss).sum::<f64>() / spe as f64;
    assert!(last < 0.1 * first, "first epoch {first:e}, last epoch {last:e}");
}
