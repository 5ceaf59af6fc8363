//! Supervised training of the unpruned model on a labelled toy task.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::criterion::{cross_entropy_criterion, entropy_criterion};
use crate::data::{BatchIterator, Dataset};
use crate::distill::{steps_per_epoch, LossRecord};
use crate::error::{AmpError, Result};
use crate::model::{ForwardOptions, VitModel};
use crate::optim::{lr_at, AdamW, DistillConfig};
use crate::tensor::Tensor;

/// Training objective `CE + spread_weight · E(z_cls; tau)`. The entropy
/// term is minimised, pushing instances apart in embedding space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherObjective {
    pub spread_weight: f64,
    pub tau: f64,
}

impl Default for TeacherObjective {
    fn default() -> Self {
        TeacherObjective {
            spread_weight: 0.0,
            tau: 1.0 / 15.0,
        }
    }
}

/// Cross-entropy training through the classifier head, with the same
/// optimizer and schedule as distillation.
pub fn train_supervised(
    model: &VitModel,
    dataset: &Dataset,
    config: &DistillConfig,
    objective: &TeacherObjective,
) -> Result<(VitModel, Vec<LossRecord>)> {
    config.validate()?;
    if model.classifier.is_none() {
        return Err(AmpError::Config("supervised training needs a classifier head".into()));
    }
    if dataset.labels.is_none() {
        return Err(AmpError::Data("supervised training needs labels".into()));
    }
    let mut model = model.clone();
    let spe = steps_per_epoch(dataset.len(), config.batch_size);
    let mut opt = AdamW::from_config(config);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        for batch in BatchIterator::new(dataset, config.batch_size, Some(config.seed.wrapping_add(epoch as u64))) {
            let lr = lr_at(config, step, spe);
            let labels = batch.labels.as_deref().expect("labelled dataset");
            let mut tape = Tape::new();
            let rec = model
                .forward(&mut tape, &batch.images, &ForwardOptions::trainable())
                .map_err(|e| e.during_step(step))?;
            let logits = rec.logits.expect("classifier present");
            let mut loss = cross_entropy_criterion(&mut tape, logits, labels)?;
            if objective.spread_weight != 0.0 && labels.len() > 1 {
                let e = entropy_criterion(&mut tape, rec.z_cls, objective.tau).map_err(|e| e.during_step(step))?;
                let e = tape.scale(e, objective.spread_weight)?;
                loss = tape.add(loss, e)?;
            }
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(AmpError::NumericFailure {
                    step,
                    detail: format!("training loss {value} at epoch {epoch}"),
                });
            }
            tape.backward(loss)?;
            let grads: Vec<Tensor> = rec
                .params
                .iter()
                .map(|&p| tape.grad(p).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(p))))
                .collect();
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            opt.step(&mut model.tensors_mut(), &grad_refs, lr);
            if !model.is_finite() {
                return Err(AmpError::NumericFailure {
                    step,
                    detail: format!("non-finite weights after the update at epoch {epoch}, lr {lr:e}"),
                });
            }
            log.push(LossRecord {
                step,
                epoch,
                loss: value,
                lr,
            });
            step += 1;
        }
        log::info!(
            "teacher epoch {epoch}: mean loss {:.4}",
            log[log.len() - spe..].iter().map(|r| r.loss).sum::<f64>() / spe as f64
        );
    }
    Ok((model, log))
}
