//! Feature distillation from the unpruned model into the pruned one.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{BatchIterator, Dataset};
use crate::error::{AmpError, Result};
use crate::io;
use crate::model::{ForwardOptions, VitModel};
use crate::optim::{lr_at, AdamW};
use crate::tensor::Tensor;

pub use crate::optim::DistillConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// `(1/C)‖Δcls‖² + (1/(N·C))‖Δpatch‖²`, averaged over the batch.
///
/// Teacher tensors enter as constants; gradients flow to the student only.
pub fn distill_loss(
    tape: &mut Tape,
    teacher_cls: Var,
    teacher_patch: Var,
    student_cls: Var,
    student_patch: Var,
) -> Result<Var> {
    for (name, t, s) in [
        ("class", teacher_cls, student_cls),
        ("patch", teacher_patch, student_patch),
    ] {
        if tape.shape(t) != tape.shape(s) {
            return Err(AmpError::Contract(format!(
                "{name} tokens: teacher {:?} vs student {:?}",
                tape.shape(t),
                tape.shape(s)
            )));
        }
    }
    let ps = tape.shape(student_patch).to_vec();
    if ps.len() != 3 {
        return Err(AmpError::Contract(format!("patch tokens must be B×N×C, got {ps:?}")));
    }
    let (b, n, c) = (ps[0], ps[1], ps[2]);
    let sq_sum = |tape: &mut Tape, t: Var, s: Var| -> Result<Var> {
        let d = tape.sub(s, t)?;
        let d2 = tape.mul(d, d)?;
        tape.sum(d2)
    };
    let cls = sq_sum(tape, teacher_cls, student_cls)?;
    let cls = tape.scale(cls, 1.0 / (b * c) as f64)?;
    let patch = sq_sum(tape, teacher_patch, student_patch)?;
    let patch = tape.scale(patch, 1.0 / (b * n * c) as f64)?;
    tape.add(cls, patch)
}

/// Teacher embeddings for every sample, stored in dataset order.
struct TeacherCache {
    cls: Vec<f64>,
    patch: Vec<f64>,
    c: usize,
    n: usize,
}

impl TeacherCache {
    fn build(teacher: &VitModel, dataset: &Dataset, batch_size: usize) -> Result<Self> {
        let c = teacher.config.embed_dim;
        let n = teacher.config.num_patches();
        let mut cls = Vec::with_capacity(dataset.len() * c);
        let mut patch = Vec::with_capacity(dataset.len() * n * c);
        for batch in dataset.batches(batch_size) {
            let (zc, zp) = teacher.embed(&batch.images, &[])?;
            cls.extend_from_slice(zc.data());
            patch.extend_from_slice(zp.data());
        }
        Ok(TeacherCache { cls, patch, c, n })
    }

    fn gather(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let (c, nc) = (self.c, self.n * self.c);
        let mut zc = Vec::with_capacity(indices.len() * c);
        let mut zp = Vec::with_capacity(indices.len() * nc);
        for &i in indices {
            zc.extend_from_slice(&self.cls[i * c..(i + 1) * c]);
            zp.extend_from_slice(&self.patch[i * nc..(i + 1) * nc]);
        }
        (
            Tensor::new(vec![indices.len(), c], zc).expect("cached widths"),
            Tensor::new(vec![indices.len(), self.n, c], zp).expect("cached widths"),
        )
    }
}

pub fn steps_per_epoch(dataset_len: usize, batch_size: usize) -> usize {
    dataset_len.div_ceil(batch_size)
}

pub fn train(
    student: &VitModel,
    teacher: &VitModel,
    dataset: &Dataset,
    config: &DistillConfig,
) -> Result<(VitModel, Vec<LossRecord>)> {
    train_with_hook(student, teacher, dataset, config, &mut |_, _| Ok(()))
}

/// Distills `teacher` into a copy of `student`. Epoch `e` visits the data in
/// an order shuffled with seed `config.seed + e`. `on_epoch(e, model)` runs
/// after every epoch.
pub fn train_with_hook(
    student: &VitModel,
    teacher: &VitModel,
    dataset: &Dataset,
    config: &DistillConfig,
    on_epoch: &mut dyn FnMut(usize, &VitModel) -> Result<()>,
) -> Result<(VitModel, Vec<LossRecord>)> {
    config.validate()?;
    if student.config.embed_dim != teacher.config.embed_dim
        || student.config.num_tokens() != teacher.config.num_tokens()
    {
        return Err(AmpError::Contract("student and teacher output shapes differ".into()));
    }
    let mut model = student.clone();
    if config.epochs == 0 || dataset.is_empty() {
        return Ok((model, Vec::new()));
    }
    let cache = TeacherCache::build(teacher, dataset, config.batch_size)?;
    let spe = steps_per_epoch(dataset.len(), config.batch_size);
    let mut opt = AdamW::from_config(config);
    let mut log = Vec::with_capacity(config.epochs * spe);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let batches = BatchIterator::new(dataset, config.batch_size, Some(config.seed.wrapping_add(epoch as u64)));
        for batch in batches {
            let lr = lr_at(config, step, spe);
            let mut tape = Tape::new();
            let rec = model
                .forward(&mut tape, &batch.images, &ForwardOptions::trainable())
                .map_err(|e| e.during_step(step))?;
            let (tc, tp) = cache.gather(&batch.indices);
            let tc = tape.constant(tc);
            let tp = tape.constant(tp);
            let loss = distill_loss(&mut tape, tc, tp, rec.z_cls, rec.z_patch).map_err(|e| e.during_step(step))?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(AmpError::NumericFailure {
                    step,
                    detail: format!("distillation loss {value} at epoch {epoch}, lr {lr:e}"),
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
            "distill epoch {epoch}: mean loss {:.6e}",
            log[log.len() - spe..].iter().map(|r| r.loss).sum::<f64>() / spe as f64
        );
        on_epoch(epoch, &model)?;
    }
    Ok((model, log))
}

pub fn write_loss_csv(path: impl AsRef<Path>, log: &[LossRecord]) -> Result<()> {
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|r| vec![r.step.to_string(), format!("{:e}", r.loss), format!("{:e}", r.lr)])
        .collect();
    io::write_csv(path, &["step", "loss", "lr"], &rows)
}
