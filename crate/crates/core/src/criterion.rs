//! Pruning criteria: the label-free information entropy of the batch
//! similarity distribution, and one-hot cross entropy as a baseline.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::error::{AmpError, Result};
use crate::model::{ForwardOptions, ForwardRecord, VitModel};
use crate::tensor::Tensor;

/// Cosine similarity between every pair of rows of `z_cls` (`B × C`).
pub fn similarity(tape: &mut Tape, z_cls: Var) -> Result<Var> {
    let shape = tape.shape(z_cls);
    if shape.len() != 2 || shape[0] < 2 {
        return Err(AmpError::Parameter(format!(
            "similarity needs a B×C batch with B ≥ 2, got {shape:?}"
        )));
    }
    let z = tape.l2_normalize(z_cls)?;
    let zt = tape.transpose(z)?;
    tape.matmul(z, zt)
}

/// Row softmax of `s / tau`, diagonal included.
pub fn prediction_probs(tape: &mut Tape, s: Var, tau: f64) -> Result<Var> {
    tape.softmax(s, tau)
}

/// `-(1/B) Σ_i Σ_j p_ij ln p_ij` in nats.
pub fn information_entropy(tape: &mut Tape, p: Var) -> Result<Var> {
    let b = tape.shape(p)[0];
    let plogp = tape.xlogx(p)?;
    let total = tape.sum(plogp)?;
    tape.scale(total, -1.0 / b as f64)
}

pub fn entropy_criterion(tape: &mut Tape, z_cls: Var, tau: f64) -> Result<Var> {
    let s = similarity(tape, z_cls)?;
    let p = prediction_probs(tape, s, tau)?;
    information_entropy(tape, p)
}

/// Mean negative log-probability of the labelled class.
pub fn cross_entropy_criterion(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(AmpError::Contract(format!(
            "{} labels for logits {shape:?}",
            labels.len()
        )));
    }
    let logp = tape.log_softmax(logits)?;
    let picked = tape.pick(logp, labels)?;
    let mean = tape.mean(picked)?;
    tape.scale(mean, -1.0)
}

/// Entropy of a batch of embeddings, computed off-tape.
pub fn entropy_value(z_cls: &Tensor, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(z_cls.clone());
    let e = entropy_criterion(&mut tape, z, tau)?;
    tape.value(e).item()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CriterionKind {
    Entropy { tau: f64 },
    CrossEntropy,
}

impl CriterionKind {
    pub fn tag(&self) -> String {
        match self {
            CriterionKind::Entropy { tau } => format!("entropy(tau={tau})"),
            CriterionKind::CrossEntropy => "cross_entropy".to_string(),
        }
    }

    pub fn needs_labels(&self) -> bool {
        matches!(self, CriterionKind::CrossEntropy)
    }

    /// Builds the scalar criterion on top of a forward record.
    pub fn apply(&self, tape: &mut Tape, rec: &ForwardRecord, labels: Option<&[usize]>) -> Result<Var> {
        match *self {
            CriterionKind::Entropy { tau } => entropy_criterion(tape, rec.z_cls, tau),
            CriterionKind::CrossEntropy => {
                let logits = rec
                    .logits
                    .ok_or_else(|| AmpError::Contract("cross-entropy criterion needs a classifier head".into()))?;
                let labels = labels.ok_or_else(|| AmpError::Contract("cross-entropy criterion needs labels".into()))?;
                cross_entropy_criterion(tape, logits, labels)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyRecord {
    pub value: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub dataset_tag: String,
    pub num_batches: usize,
}

pub fn evaluate_entropy(model: &VitModel, dataset: &Dataset, tau: f64, batch_size: usize) -> Result<EntropyRecord> {
    evaluate_entropy_masked(model, dataset, tau, batch_size, &[])
}

/// Mean per-batch entropy over one fixed-order pass of `dataset`. A trailing
/// batch smaller than `batch_size` is skipped so every term shares the same
/// `ln B` ceiling.
pub fn evaluate_entropy_masked(
    model: &VitModel,
    dataset: &Dataset,
    tau: f64,
    batch_size: usize,
    masks: &[Option<Tensor>],
) -> Result<EntropyRecord> {
    if tau <= 0.0 {
        return Err(AmpError::Parameter(format!("temperature must be positive, got {tau}")));
    }
    if batch_size < 2 || dataset.len() < batch_size {
        return Err(AmpError::Parameter(format!(
            "need at least one batch of {batch_size} ≥ 2 samples, dataset has {}",
            dataset.len()
        )));
    }
    let opts = ForwardOptions::default().with_masks(masks.to_vec());
    let mut total = 0.0;
    let mut count = 0;
    for batch in dataset.batches(batch_size).filter(|b| b.indices.len() == batch_size) {
        let mut tape = Tape::new();
        let rec = model.forward(&mut tape, &batch.images, &opts)?;
        let e = entropy_criterion(&mut tape, rec.z_cls, tau)?;
        total += tape.value(e).item()?;
        count += 1;
    }
    Ok(EntropyRecord {
        value: total / count as f64,
        batch_size,
        temperature: tau,
        dataset_tag: dataset.source_tag.clone(),
        num_batches: count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(b: usize, c: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![b, c], data).unwrap()
    }

    #[test]
    fn identical_rows_give_all_ones() {
        let mut tape = Tape::new();
        let z = tape.constant(rows(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]));
        let s = similarity(&mut tape, z).unwrap();
        assert!(tape.value(s).data().iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn orthogonal_rows_give_identity() {
        let mut tape = Tape::new();
        let z = tape.constant(rows(2, 2, vec![3.0, 0.0, 0.0, 2.0]));
        let s = similarity(&mut tape, z).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_row_is_domain_error() {
        let mut tape = Tape::new();
        let z = tape.constant(rows(2, 2, vec![0.0, 0.0, 1.0, 0.0]));
        assert!(matches!(similarity(&mut tape, z), Err(AmpError::NumericDomain(_))));
    }

    #[test]
    fn single_row_is_rejected() {
        let mut tape = Tape::new();
        let z = tape.constant(rows(1, 2, vec![1.0, 0.0]));
        assert!(matches!(similarity(&mut tape, z), Err(AmpError::Parameter(_))));
    }

    #[test]
    fn uniform_probs_give_ln_b() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::ones(&[4, 4]));
        let p = prediction_probs(&mut tape, s, 0.3).unwrap();
        assert!(tape.value(p).data().iter().all(|v| (v - 0.25).abs() < 1e-15));
        let e = information_entropy(&mut tape, p).unwrap();
        assert_eq!(tape.value(e).item().unwrap(), 4f64.ln());
    }

    #[test]
    fn bad_temperature_is_parameter_error() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::ones(&[2, 2]));
        assert!(matches!(
            prediction_probs(&mut tape, s, 0.0),
            Err(AmpError::Parameter(_))
        ));
    }

    #[test]
    fn cross_entropy_uniform_and_label_errors() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[3, 4]));
        let ce = cross_entropy_criterion(&mut tape, l, &[0, 1, 3]).unwrap();
        assert!((tape.value(ce).item().unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(matches!(
            cross_entropy_criterion(&mut tape, l, &[0, 1, 4]),
            Err(AmpError::Parameter(_))
        ));
    }

    #[test]
    fn dominant_logit_gives_zero_cross_entropy() {
        let mut tape = Tape::new();
        let l = tape.constant(rows(1, 3, vec![0.0, 1e6, 0.0]));
        let ce = cross_entropy_criterion(&mut tape, l, &[1]).unwrap();
        assert_eq!(tape.value(ce).item().unwrap(), 0.0);
    }

    #[test]
    fn criterion_kind_roundtrips_json() {
        let k = CriterionKind::Entropy { tau: 1.0 / 15.0 };
        let s = serde_json::to_string(&k).unwrap();
        assert_eq!(serde_json::from_str::<CriterionKind>(&s).unwrap(), k);
    }
}
