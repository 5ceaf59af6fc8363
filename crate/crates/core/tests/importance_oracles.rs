mod common;

use amp_core::criterion::CriterionKind;
use amp_core::data::synth_dataset;
use amp_core::importance::{
    accumulate, compute_importance, fidelity_check, rank, spearman, taylor_contributions_batch, taylor_scores_batch,
    taylor_vs_ablation,
};
use amp_core::{Aggregation, ForwardOptions, ImportanceTable, ModelConfig, Tape, Tensor, VitModel};
use common::{random_tensor, rng};
use proptest::prelude::*;
use rand::Rng;

const TAU: f64 = 1.0 / 15.0;

fn model(seed: u64) -> VitModel {
    let cfg = ModelConfig::new(16, 8, 16, 2, 2, 24).with_classes(4);
    let mut m = VitModel::init_random(cfg, seed).unwrap();
    let mut r = rng(seed + 100);
    for t in m.tensors_mut() {
        for v in t.data_mut() {
            *v += r.gen_range(-0.2..0.2);
        }
    }
    m
}

fn criterion_at(
    m: &VitModel,
    images: &Tensor,
    labels: Option<&[usize]>,
    crit: &CriterionKind,
    masks: Vec<Option<Tensor>>,
) -> f64 {
    let mut tape = Tape::new();
    let rec = m
        .forward(&mut tape, images, &ForwardOptions::default().with_masks(masks))
        .unwrap();
    let c = crit.apply(&mut tape, &rec, labels).unwrap();
    tape.value(c).item().unwrap()
}

/// `Σ ĥ_k ∂C/∂ĥ_k` is the derivative of C along a per-neuron gain at 1,
/// so a central difference over the mask entry recovers it without the
/// backward pass.
fn directional_oracle(m: &VitModel, images: &Tensor, labels: Option<&[usize]>, crit: &CriterionKind) -> Vec<Vec<f64>> {
    let h = 1e-5;
    let widths = m.hidden_sizes();
    let mut out = Vec::new();
    for (l, &w) in widths.iter().enumerate() {
        let mut row = Vec::new();
        for k in 0..w {
            let with = |g: f64| {
                let mut masks = vec![None; widths.len()];
                let mut t = Tensor::ones(&[w]);
                t.data_mut()[k] = g;
                masks[l] = Some(t);
                criterion_at(m, images, labels, crit, masks)
            };
            row.push((with(1.0 + h) - with(1.0 - h)) / (2.0 * h));
        }
        out.push(row);
    }
    out
}

#[test]
fn single_activation_times_gradient() {
    let build = |tape: &mut Tape, mask: Option<&Tensor>| {
        let h = tape.param(Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap());
        let cap = tape.capture(h)?;
        let h = match mask {
            Some(m) => {
                let m = tape.constant(m.clone());
                tape.mul_trailing(h, m)?
            }
            None => h,
        };
        let c = tape.scale(h, 3.0)?;
        let c = tape.sum(c)?;
        Ok((c, cap))
    };
    let f = taylor_vs_ablation(build, 1, 0, 1.0).unwrap();
    assert_eq!(f.taylor_delta, 6.0);
    assert_eq!(f.true_delta, 6.0);
}

#[test]
fn contributions_match_directional_derivative() {
    let m = model(1);
    let d = synth_dataset(4, 2, 16, 3).unwrap();
    let idx: Vec<usize> = (0..6).collect();
    let images = d.gather(&idx);
    let labels = d.gather_labels(&idx).unwrap();
    for (crit, lab) in [
        (CriterionKind::Entropy { tau: TAU }, None),
        (CriterionKind::CrossEntropy, Some(labels.as_slice())),
    ] {
        let got = taylor_contributions_batch(&m, &images, lab, &crit).unwrap();
        let want = directional_oracle(&m, &images, lab, &crit);
        let scale = want.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
        for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
            assert!((g - w).abs() < 1e-6 * scale.max(1.0), "{g} vs {w}");
        }
        let abs = taylor_scores_batch(&m, &images, lab, &crit).unwrap();
        for (a, g) in abs.iter().flatten().zip(got.iter().flatten()) {
            assert_eq!(*a, g.abs());
        }
    }
}

#[test]
fn contributions_equal_explicit_loop_over_samples_and_tokens() {
    let m = model(2);
    let d = synth_dataset(4, 1, 16, 4).unwrap();
    let images = d.gather(&[0, 1, 2, 3]);
    let mut tape = Tape::new();
    let rec = m.forward(&mut tape, &images, &ForwardOptions::capture_all(2)).unwrap();
    let c = amp_core::criterion::entropy_criterion(&mut tape, rec.z_cls, TAU).unwrap();
    tape.backward(c).unwrap();
    let got = taylor_contributions_batch(&m, &images, None, &CriterionKind::Entropy { tau: TAU }).unwrap();
    for (l, h) in &rec.hidden {
        let v = tape.captured_value(*h);
        let g = tape.captured_grad(*h).unwrap();
        let (b, n, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        for k in 0..w {
            let mut s = 0.0;
            for i in 0..b {
                for t in 0..n {
                    let at = (i * n + t) * w + k;
                    s += v.data()[at] * g.data()[at];
                }
            }
            assert!((got[*l][k] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn dead_neurons_score_zero() {
    let mut m = model(3);
    // neuron 5 of block 0 has zero pre-activation, neuron 7 of block 1 feeds nothing
    let w0 = m.blocks[0].fc1.weight.shape()[0];
    for i in 0..w0 {
        let cols = m.blocks[0].fc1.weight.shape()[1];
        m.blocks[0].fc1.weight.data_mut()[i * cols + 5] = 0.0;
    }
    m.blocks[0].fc1.bias.data_mut()[5] = 0.0;
    let c = m.config.embed_dim;
    for j in 0..c {
        m.blocks[1].fc2.weight.data_mut()[7 * c + j] = 0.0;
    }
    let d = synth_dataset(4, 2, 16, 5).unwrap();
    let t = compute_importance(&m, &d, &CriterionKind::Entropy { tau: TAU }, 4, Aggregation::BatchMean).unwrap();
    assert_eq!(t.scores[0][5], 0.0);
    assert_eq!(t.scores[1][7], 0.0);
    assert!(t.scores[0].iter().filter(|v| **v > 0.0).count() > 20);
}

#[test]
fn running_mean_matches_batch_average() {
    let mut r = rng(9);
    let batches: Vec<Vec<Vec<f64>>> = (0..5)
        .map(|_| {
            vec![
                (0..6).map(|_| r.gen_range(0.0..3.0)).collect(),
                (0..4).map(|_| r.gen_range(0.0..3.0)).collect(),
            ]
        })
        .collect();
    let mut table = ImportanceTable::empty("t", Aggregation::BatchMean);
    for b in &batches {
        accumulate(&mut table, b).unwrap();
    }
    assert_eq!(table.batches_accumulated, 5);
    for l in 0..2 {
        for k in 0..batches[0][l].len() {
            let mean = batches.iter().map(|b| b[l][k]).sum::<f64>() / 5.0;
            assert!((table.scores[l][k] - mean).abs() < 1e-12);
        }
    }
    assert!(accumulate(&mut table, &[vec![0.0; 6]]).is_err());
    assert!(accumulate(&mut table, &[vec![0.0; 6], vec![0.0; 3]]).is_err());
}

#[test]
fn compute_importance_averages_full_batches_only() {
    let m = model(4);
    let d = synth_dataset(4, 3, 16, 6).unwrap();
    let crit = CriterionKind::Entropy { tau: TAU };
    let t = compute_importance(&m, &d, &crit, 5, Aggregation::BatchMean).unwrap();
    assert_eq!(t.batches_accumulated, 2);
    let b0 = taylor_scores_batch(&m, &d.gather(&[0, 1, 2, 3, 4]), None, &crit).unwrap();
    let b1 = taylor_scores_batch(&m, &d.gather(&[5, 6, 7, 8, 9]), None, &crit).unwrap();
    for l in 0..2 {
        for k in 0..24 {
            assert!((t.scores[l][k] - (b0[l][k] + b1[l][k]) / 2.0).abs() < 1e-12);
        }
    }
    let g = compute_importance(&m, &d, &crit, 5, Aggregation::GlobalSum).unwrap();
    let s0 = taylor_contributions_batch(&m, &d.gather(&[0, 1, 2, 3, 4]), None, &crit).unwrap();
    let s1 = taylor_contributions_batch(&m, &d.gather(&[5, 6, 7, 8, 9]), None, &crit).unwrap();
    for l in 0..2 {
        for k in 0..24 {
            assert!((g.scores[l][k] - (s0[l][k] + s1[l][k]).abs() / 2.0).abs() < 1e-12);
        }
    }
    let again = compute_importance(&m, &d, &crit, 5, Aggregation::BatchMean).unwrap();
    assert_eq!(t, again);
}

#[test]
fn cross_entropy_needs_labels() {
    let m = model(5);
    let mut d = synth_dataset(4, 2, 16, 7).unwrap();
    d.labels = None;
    assert!(compute_importance(&m, &d, &CriterionKind::CrossEntropy, 4, Aggregation::BatchMean).is_err());
}

#[test]
fn first_order_is_exact_for_linear_criterion() {
    let mut r = rng(11);
    let hval = random_tensor(&[3, 2, 5], &mut r);
    let w = random_tensor(&[3, 2, 5], &mut r);
    for k in 0..5 {
        let build = |tape: &mut Tape, mask: Option<&Tensor>| {
            let h = tape.param(hval.clone());
            let cap = tape.capture(h)?;
            let m = tape.constant(mask.cloned().unwrap_or_else(|| Tensor::ones(&[5])));
            let h = tape.mul_trailing(h, m)?;
            let wv = tape.constant(w.clone());
            let p = tape.mul(h, wv)?;
            let c = tape.sum(p)?;
            Ok((c, cap))
        };
        let f = taylor_vs_ablation(build, 5, k, 1.0).unwrap();
        assert!(f.gap() < 1e-10, "{f:?}");
    }
}

#[test]
fn first_order_gap_shrinks_quadratically() {
    let m = model(6);
    let d = synth_dataset(4, 1, 16, 8).unwrap();
    let images = d.gather(&[0, 1, 2, 3]);
    let crit = CriterionKind::Entropy { tau: 0.5 };
    for (block, neuron) in [(0, 3), (1, 11)] {
        let a = fidelity_check(&m, block, neuron, &crit, &images, None, 2e-2).unwrap();
        let b = fidelity_check(&m, block, neuron, &crit, &images, None, 1e-2).unwrap();
        let ratio = a.gap() / b.gap();
        assert!((3.5..4.5).contains(&ratio), "gap ratio {ratio}");
    }
}

#[test]
fn rank_breaks_ties_by_index_and_rejects_nan() {
    let mut t = ImportanceTable::empty("t", Aggregation::BatchMean);
    t.scores = vec![vec![1.0, 3.0, 1.0, 2.0, 3.0]];
    t.batches_accumulated = 1;
    let r = rank(&t).unwrap();
    assert_eq!(r.order[0], vec![1, 4, 3, 0, 2]);
    assert_eq!(r.kept(0, 3), vec![1, 3, 4]);
    assert_eq!(r.mask(0, 2).data(), &[0.0, 1.0, 0.0, 0.0, 1.0]);
    t.scores[0][2] = f64::NAN;
    assert!(rank(&t).is_err());
}

#[test]
fn spearman_oracle_values() {
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-15);
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
    // ranks (1,2,3,4,5) vs (2,1,4,3,5): 1 - 6·4/(5·24) = 0.8
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 4.0, 3.0, 5.0]) - 0.8).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ranking_ignores_positive_rescaling(scores in prop::collection::vec(0.0f64..10.0, 1..40), c in 1e-3f64..1e3) {
        let mut t = ImportanceTable::empty("t", Aggregation::BatchMean);
        t.scores = vec![scores.clone()];
        t.batches_accumulated = 1;
        let mut u = t.clone();
        u.scores = vec![scores.iter().map(|v| v * c).collect()];
        prop_assert_eq!(rank(&t).unwrap(), rank(&u).unwrap());
    }

    #[test]
    fn ranking_is_a_descending_permutation(scores in prop::collection::vec(0.0f64..10.0, 1..40)) {
        let mut t = ImportanceTable::empty("t", Aggregation::BatchMean);
        t.scores = vec![scores.clone()];
        t.batches_accumulated = 1;
        let order = &rank(&t).unwrap().order[0];
        let mut seen = order.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..scores.len()).collect::<Vec<_>>());
        for w in order.windows(2) {
            prop_assert!(scores[w[0]] > scores[w[1]] || (scores[w[0]] == scores[w[1]] && w[0] < w[1]));
        }
    }
}
