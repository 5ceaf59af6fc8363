//! End-to-end gradient checks through the toy encoder and the criteria.

mod common;

use amp_core::criterion::{cross_entropy_criterion, entropy_criterion};
use amp_core::{ForwardOptions, ModelConfig, Tape, Tensor, VitModel};
use common::{rel_err, rng};
use rand::Rng;

fn tiny_model(classes: usize) -> VitModel {
    let cfg = ModelConfig::new(8, 4, 8, 2, 2, 8).with_classes(classes);
    let mut m = VitModel::init_random(cfg, 5).unwrap();
    // lift weights off the near-linear regime of the default init
    let mut r = rng(17);
    for t in m.tensors_mut() {
        for v in t.data_mut() {
            *v += r.gen_range(-0.3..0.3);
        }
    }
    m
}

fn images(b: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(&[b, 8, 8, 3], |_| r.gen_range(0.0..1.0))
}

enum Crit {
    Entropy(f64),
    Xent(Vec<usize>),
}

fn loss(model: &VitModel, x: &Tensor, crit: &Crit) -> f64 {
    let mut tape = Tape::new();
    let rec = model.forward(&mut tape, x, &ForwardOptions::default()).unwrap();
    let c = match crit {
        Crit::Entropy(tau) => entropy_criterion(&mut tape, rec.z_cls, *tau).unwrap(),
        Crit::Xent(labels) => cross_entropy_criterion(&mut tape, rec.logits.unwrap(), labels).unwrap(),
    };
    tape.value(c).item().unwrap()
}

/// Largest relative error over every element of every parameter.
fn max_param_grad_error(model: &VitModel, x: &Tensor, crit: &Crit, step: f64) -> f64 {
    let mut tape = Tape::new();
    let rec = model.forward(&mut tape, x, &ForwardOptions::trainable()).unwrap();
    let c = match crit {
        Crit::Entropy(tau) => entropy_criterion(&mut tape, rec.z_cls, *tau).unwrap(),
        Crit::Xent(labels) => cross_entropy_criterion(&mut tape, rec.logits.unwrap(), labels).unwrap(),
    };
    tape.backward(c).unwrap();
    let grads: Vec<Tensor> = rec.params.iter().map(|&p| tape.grad(p).unwrap().clone()).collect();

    let mut worst = 0.0f64;
    let mut probe = model.clone();
    for (pi, g) in grads.iter().enumerate() {
        for i in 0..g.numel() {
            let orig = probe.tensors()[pi].data()[i];
            probe.tensors_mut()[pi].data_mut()[i] = orig + step;
            let up = loss(&probe, x, crit);
            probe.tensors_mut()[pi].data_mut()[i] = orig - step;
            let down = loss(&probe, x, crit);
            probe.tensors_mut()[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(rel_err(g.data()[i], numeric));
        }
    }
    worst
}

#[test]
fn entropy_gradient_through_two_block_model() {
    let model = tiny_model(0);
    let x = images(3, 1);
    let err = max_param_grad_error(&model, &x, &Crit::Entropy(0.5), 1e-4);
    assert!(err < 1e-4, "max relative error {err:e}");
}

#[test]
fn entropy_gradient_at_sharp_temperature() {
    let model = tiny_model(0);
    let x = images(3, 2);
    let err = max_param_grad_error(&model, &x, &Crit::Entropy(1.0 / 15.0), 1e-4);
    assert!(err < 1e-4, "max relative error {err:e}");
}

#[test]
fn cross_entropy_gradient_through_two_block_model() {
    let model = tiny_model(3);
    let x = images(3, 3);
    let err = max_param_grad_error(&model, &x, &Crit::Xent(vec![0, 2, 1]), 1e-4);
    assert!(err < 1e-4, "max relative error {err:e}");
}

#[test]
fn entropy_reaches_nearly_every_parameter() {
    let cfg = ModelConfig::new(8, 4, 8, 2, 2, 8);
    let model = VitModel::init_random(cfg, 9).unwrap();
    let x = images(4, 4);
    let mut tape = Tape::new();
    let rec = model.forward(&mut tape, &x, &ForwardOptions::trainable()).unwrap();
    let c = entropy_criterion(&mut tape, rec.z_cls, 1.0 / 15.0).unwrap();
    tape.backward(c).unwrap();
    let (mut zeros, mut total) = (0usize, 0usize);
    for &p in &rec.params {
        let g = tape.grad(p).unwrap();
        zeros += g.data().iter().filter(|&&v| v == 0.0).count();
        total += g.numel();
    }
    let frac = zeros as f64 / total as f64;
    assert!(frac < 0.01, "{zeros} of {total} gradients are exactly zero");
}
