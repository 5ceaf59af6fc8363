//! First-order Taylor importance of MLP hidden neurons.
//!
//! For neuron `k` the criterion change from zeroing its activation is
//! estimated as `Σ ĥ_k · ∂C/∂ĥ_k` over tokens and samples, and the score is
//! the magnitude of that estimate.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CaptureHandle, Tape, Var};
use crate::criterion::CriterionKind;
use crate::data::Dataset;
use crate::error::{AmpError, Result};
use crate::io;
use crate::model::{ForwardOptions, VitModel};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// `|Σ|` per batch, then the mean over batches.
    #[default]
    BatchMean,
    /// Signed sums over all batches, magnitude taken once at the end.
    GlobalSum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub criterion_tag: String,
    pub aggregation: Aggregation,
    pub batches_accumulated: usize,
    /// `scores[l][k]` for neuron `k` of block `l`.
    pub scores: Vec<Vec<f64>>,
}

impl ImportanceTable {
    pub fn empty(criterion_tag: impl Into<String>, aggregation: Aggregation) -> Self {
        ImportanceTable {
            criterion_tag: criterion_tag.into(),
            aggregation,
            batches_accumulated: 0,
            scores: Vec::new(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        io::read_json(path)
    }
}

/// Per-block neuron order, most important first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronRanking {
    pub order: Vec<Vec<usize>>,
}

impl NeuronRanking {
    pub fn num_blocks(&self) -> usize {
        self.order.len()
    }

    /// Multiplier keeping the top `keep` neurons of `block`.
    pub fn mask(&self, block: usize, keep: usize) -> Tensor {
        let order = &self.order[block];
        let mut m = Tensor::zeros(&[order.len()]);
        for &k in &order[..keep] {
            m.data_mut()[k] = 1.0;
        }
        m
    }

    /// Top `keep` neurons of `block` in ascending index order.
    pub fn kept(&self, block: usize, keep: usize) -> Vec<usize> {
        let mut k = self.order[block][..keep].to_vec();
        k.sort_unstable();
        k
    }
}

/// Signed per-neuron sums `Σ_b Σ_n ĥ · ∂C/∂ĥ` for one batch.
pub fn taylor_contributions_batch(
    model: &VitModel,
    images: &Tensor,
    labels: Option<&[usize]>,
    criterion: &CriterionKind,
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let opts = ForwardOptions::capture_all(model.num_blocks());
    let rec = model.forward(&mut tape, images, &opts)?;
    let c = criterion.apply(&mut tape, &rec, labels)?;
    tape.backward(c)?;
    rec.hidden.values().map(|&h| contributions(&tape, h)).collect()
}

fn contributions(tape: &Tape, h: CaptureHandle) -> Result<Vec<f64>> {
    let value = tape.captured_value(h);
    let grad = tape.captured_grad(h)?;
    let m = value.last_dim();
    let mut out = vec![0.0; m];
    for (row_v, row_g) in value.data().chunks(m).zip(grad.data().chunks(m)) {
        for ((o, v), g) in out.iter_mut().zip(row_v).zip(row_g) {
            *o += v * g;
        }
    }
    Ok(out)
}

/// `I_k = |Σ_b Σ_n ĥ_k · ∂C/∂ĥ_k|` for every block on one batch.
pub fn taylor_scores_batch(
    model: &VitModel,
    images: &Tensor,
    labels: Option<&[usize]>,
    criterion: &CriterionKind,
) -> Result<Vec<Vec<f64>>> {
    let raw = taylor_contributions_batch(model, images, labels, criterion)?;
    Ok(raw.into_iter().map(|b| b.into_iter().map(f64::abs).collect()).collect())
}

/// Folds one batch into the running mean.
pub fn accumulate(table: &mut ImportanceTable, batch_scores: &[Vec<f64>]) -> Result<()> {
    if table.batches_accumulated == 0 {
        table.scores = batch_scores.to_vec();
        table.batches_accumulated = 1;
        return Ok(());
    }
    if table.scores.len() != batch_scores.len() {
        return Err(AmpError::Contract(format!(
            "table has {} blocks, batch has {}",
            table.scores.len(),
            batch_scores.len()
        )));
    }
    for (l, (t, b)) in table.scores.iter().zip(batch_scores).enumerate() {
        if t.len() != b.len() {
            return Err(AmpError::Contract(format!(
                "block {l}: table has {} neurons, batch has {}",
                t.len(),
                b.len()
            )));
        }
    }
    let n = (table.batches_accumulated + 1) as f64;
    for (t, b) in table.scores.iter_mut().zip(batch_scores) {
        for (s, x) in t.iter_mut().zip(b) {
            *s += (x - *s) / n;
        }
    }
    table.batches_accumulated += 1;
    Ok(())
}

/// Scores every neuron over one fixed-order pass of `dataset`.
pub fn compute_importance(
    model: &VitModel,
    dataset: &Dataset,
    criterion: &CriterionKind,
    batch_size: usize,
    aggregation: Aggregation,
) -> Result<ImportanceTable> {
    if criterion.needs_labels() && dataset.labels.is_none() {
        return Err(AmpError::Data(format!("{} needs a labelled dataset", criterion.tag())));
    }
    let mut table = ImportanceTable::empty(criterion.tag(), aggregation);
    let mut signed: Vec<Vec<f64>> = Vec::new();
    for batch in dataset.batches(batch_size).filter(|b| b.indices.len() == batch_size) {
        let raw = taylor_contributions_batch(model, &batch.images, batch.labels.as_deref(), criterion)?;
        if raw.iter().flatten().any(|v| !v.is_finite()) {
            return Err(AmpError::Data(format!(
                "non-finite importance contribution in batch starting at sample {}",
                batch.indices[0]
            )));
        }
        match aggregation {
            Aggregation::BatchMean => {
                let scores: Vec<Vec<f64>> = raw.iter().map(|b| b.iter().map(|v| v.abs()).collect()).collect();
                accumulate(&mut table, &scores)?;
            }
            Aggregation::GlobalSum => {
                if signed.is_empty() {
                    signed = raw;
                } else {
                    for (s, r) in signed.iter_mut().zip(&raw) {
                        for (a, b) in s.iter_mut().zip(r) {
                            *a += b;
                        }
                    }
                }
                table.batches_accumulated += 1;
            }
        }
    }
    if table.batches_accumulated == 0 {
        return Err(AmpError::Parameter(format!(
            "dataset of {} samples has no full batch of {batch_size}",
            dataset.len()
        )));
    }
    if aggregation == Aggregation::GlobalSum {
        let n = table.batches_accumulated as f64;
        table.scores = signed
            .into_iter()
            .map(|b| b.into_iter().map(|v| v.abs() / n).collect())
            .collect();
    }
    Ok(table)
}

/// Stable descending order per block; equal scores keep ascending index.
pub fn rank(table: &ImportanceTable) -> Result<NeuronRanking> {
    let mut order = Vec::with_capacity(table.scores.len());
    for (l, scores) in table.scores.iter().enumerate() {
        if let Some(k) = scores.iter().position(|v| v.is_nan()) {
            return Err(AmpError::Data(format!("NaN score for neuron {k} of block {l}")));
        }
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
        order.push(idx);
    }
    Ok(NeuronRanking { order })
}

/// First-order estimate against the literal change from removing a neuron.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fidelity {
    /// `Σ ĥ_k · ∂C/∂ĥ_k`
    pub taylor_delta: f64,
    /// `C(h_k = ĥ_k) − C(h_k = 0)`
    pub true_delta: f64,
}

impl Fidelity {
    pub fn gap(&self) -> f64 {
        (self.taylor_delta - self.true_delta).abs()
    }
}

/// Compares the two deltas for any graph exposing a captured activation.
///
/// `build(tape, mask)` must record the criterion and return it together
/// with the capture of the activation, applying `mask` (when given) as a
/// per-neuron multiplier after the capture point.
pub fn taylor_vs_ablation<F>(build: F, width: usize, neuron: usize, scale: f64) -> Result<Fidelity>
where
    F: Fn(&mut Tape, Option<&Tensor>) -> Result<(Var, CaptureHandle)>,
{
    if neuron >= width {
        return Err(AmpError::Parameter(format!(
            "neuron {neuron} out of range for width {width}"
        )));
    }
    let mut kept = Tensor::ones(&[width]);
    kept.data_mut()[neuron] = scale;
    let mut dropped = Tensor::ones(&[width]);
    dropped.data_mut()[neuron] = 0.0;

    let mut tape = Tape::new();
    let (c, h) = build(&mut tape, Some(&kept))?;
    tape.backward(c)?;
    let base = tape.value(c).item()?;
    // The capture sits before the multiplier, so its gradient already carries
    // the factor `scale`; the product equals (scale·ĥ)·∂C/∂(scale·ĥ).
    let taylor_delta = contributions(&tape, h)?[neuron];

    let mut tape = Tape::new();
    let (c0, _) = build(&mut tape, Some(&dropped))?;
    let ablated = tape.value(c0).item()?;
    Ok(Fidelity {
        taylor_delta,
        true_delta: base - ablated,
    })
}

/// [`taylor_vs_ablation`] for neuron `neuron` of block `block` of a model.
/// `scale` multiplies that neuron's activation in the reference state.
pub fn fidelity_check(
    model: &VitModel,
    block: usize,
    neuron: usize,
    criterion: &CriterionKind,
    images: &Tensor,
    labels: Option<&[usize]>,
    scale: f64,
) -> Result<Fidelity> {
    if block >= model.num_blocks() {
        return Err(AmpError::Parameter(format!("block {block} out of range")));
    }
    let width = model.hidden_sizes()[block];
    let build = |tape: &mut Tape, mask: Option<&Tensor>| {
        let mut masks = vec![None; model.num_blocks()];
        masks[block] = mask.cloned();
        let opts = ForwardOptions {
            capture: vec![block],
            ..Default::default()
        }
        .with_masks(masks);
        let rec = model.forward(tape, images, &opts)?;
        let c = criterion.apply(tape, &rec, labels)?;
        Ok((c, rec.hidden[&block]))
    };
    taylor_vs_ablation(build, width, neuron, scale)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs equal-length samples");
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    cov / (va * vb).sqrt()
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}
