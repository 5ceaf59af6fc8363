#![allow(dead_code)]

use amp_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Relative error with a unit floor on the denominator, so near-zero
/// gradients are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central finite-difference gradient of a scalar function.
pub fn numeric_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        g.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * step);
    }
    g
}

/// Checks the tape gradient of `build` (a scalar function of the leaves)
/// against central differences for every input. Returns the max relative
/// error.
pub fn check_grads(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var, step: f64) -> f64 {
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item().unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    tape.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap();
        let f = |xk: &Tensor| {
            let mut xs = inputs.to_vec();
            xs[k] = xk.clone();
            eval(&xs)
        };
        let numeric = numeric_grad(&f, &inputs[k], step);
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    worst
}

/// Contracts a tensor to a scalar with fixed pseudo-random weights so every
/// output element influences the gradient differently.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let mut r = rng(seed);
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(random_tensor(&shape, &mut r));
    let p = tape.mul(x, w).unwrap();
    tape.sum(p).unwrap()
}
