//! Per-block binary search over MLP hidden sizes, last block first, and the
//! structural surgery that realises the result.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::criterion::evaluate_entropy_masked;
use crate::data::Dataset;
use crate::error::{AmpError, Result};
use crate::importance::NeuronRanking;
use crate::io;
use crate::model::VitModel;
use crate::tensor::Tensor;

/// Source of entropy values for candidate hidden sizes.
///
/// Blocks already passed to [`EntropyProbe::finalize`] stay at their chosen
/// size for every later evaluation.
pub trait EntropyProbe {
    /// Entropy of the current configuration.
    fn baseline(&mut self) -> Result<f64>;
    /// Entropy with `block` restricted to its `keep` most important neurons.
    fn entropy(&mut self, block: usize, keep: usize) -> Result<f64>;
    fn finalize(&mut self, block: usize, keep: usize) -> Result<()>;
}

/// Evaluates candidates by masking a model on a fixed dataset.
pub struct ModelProbe<'a> {
    model: &'a VitModel,
    ranking: &'a NeuronRanking,
    dataset: &'a Dataset,
    tau: f64,
    batch_size: usize,
    masks: Vec<Option<Tensor>>,
}

impl<'a> ModelProbe<'a> {
    pub fn new(
        model: &'a VitModel,
        ranking: &'a NeuronRanking,
        dataset: &'a Dataset,
        tau: f64,
        batch_size: usize,
    ) -> Result<Self> {
        let hidden = model.hidden_sizes();
        if ranking.num_blocks() != hidden.len() {
            return Err(AmpError::Contract(format!(
                "ranking covers {} blocks, model has {}",
                ranking.num_blocks(),
                hidden.len()
            )));
        }
        for (l, (order, &m)) in ranking.order.iter().zip(&hidden).enumerate() {
            if order.len() != m {
                return Err(AmpError::Contract(format!(
                    "ranking for block {l} has {} neurons, block has {m}",
                    order.len()
                )));
            }
        }
        Ok(ModelProbe {
            model,
            ranking,
            dataset,
            tau,
            batch_size,
            masks: vec![None; hidden.len()],
        })
    }

    fn eval(&self, masks: &[Option<Tensor>]) -> Result<f64> {
        Ok(evaluate_entropy_masked(self.model, self.dataset, self.tau, self.batch_size, masks)?.value)
    }
}

impl EntropyProbe for ModelProbe<'_> {
    fn baseline(&mut self) -> Result<f64> {
        self.eval(&self.masks)
    }

    fn entropy(&mut self, block: usize, keep: usize) -> Result<f64> {
        let mut masks = self.masks.clone();
        masks[block] = Some(self.ranking.mask(block, keep));
        self.eval(&masks)
    }

    fn finalize(&mut self, block: usize, keep: usize) -> Result<()> {
        self.masks[block] = Some(self.ranking.mask(block, keep));
        Ok(())
    }
}

/// Wraps a probe and remembers every value it returned.
pub struct RecordingProbe<P> {
    pub inner: P,
    pub baseline: Option<f64>,
    pub evaluations: BTreeMap<(usize, usize), f64>,
}

impl<P> RecordingProbe<P> {
    pub fn new(inner: P) -> Self {
        RecordingProbe {
            inner,
            baseline: None,
            evaluations: BTreeMap::new(),
        }
    }
}

impl<P: EntropyProbe> EntropyProbe for RecordingProbe<P> {
    fn baseline(&mut self) -> Result<f64> {
        let e = self.inner.baseline()?;
        self.baseline = Some(e);
        Ok(e)
    }

    fn entropy(&mut self, block: usize, keep: usize) -> Result<f64> {
        let e = self.inner.entropy(block, keep)?;
        self.evaluations.insert((block, keep), e);
        Ok(e)
    }

    fn finalize(&mut self, block: usize, keep: usize) -> Result<()> {
        self.inner.finalize(block, keep)
    }
}

/// Probe backed by a closure `f(block, keep, finalized)`, where `finalized`
/// maps already-searched blocks to their chosen sizes.
pub struct FnProbe<F> {
    f: F,
    hidden: Vec<usize>,
    finalized: BTreeMap<usize, usize>,
}

impl<F: FnMut(usize, usize, &BTreeMap<usize, usize>) -> f64> FnProbe<F> {
    pub fn new(hidden: Vec<usize>, f: F) -> Self {
        FnProbe {
            f,
            hidden,
            finalized: BTreeMap::new(),
        }
    }
}

impl<F: FnMut(usize, usize, &BTreeMap<usize, usize>) -> f64> EntropyProbe for FnProbe<F> {
    fn baseline(&mut self) -> Result<f64> {
        let last = self.hidden.len() - 1;
        let m = self.finalized.get(&last).copied().unwrap_or(self.hidden[last]);
        Ok((self.f)(last, m, &self.finalized))
    }

    fn entropy(&mut self, block: usize, keep: usize) -> Result<f64> {
        Ok((self.f)(block, keep, &self.finalized))
    }

    fn finalize(&mut self, block: usize, keep: usize) -> Result<()> {
        self.finalized.insert(block, keep);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub m_t: usize,
    pub e_t: f64,
    pub accepted: bool,
    /// Interval after this step.
    pub m_min: usize,
    pub m_max: usize,
}

/// Outcome of one block's search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSearch {
    pub block: usize,
    pub m0: usize,
    pub m_res: usize,
    pub e0: f64,
    pub e_res: f64,
    pub trace: Vec<TraceRow>,
}

/// Binary search for the smallest hidden size of `block` whose entropy stays
/// within `delta_e` of `e0`. Candidates are only probed, never finalized.
pub fn search_block(
    probe: &mut dyn EntropyProbe,
    block: usize,
    m0: usize,
    delta_e: f64,
    t_max: usize,
    e0: f64,
) -> Result<BlockSearch> {
    if t_max < 1 {
        return Err(AmpError::Parameter("t_max must be at least 1".into()));
    }
    if delta_e.is_nan() {
        return Err(AmpError::Parameter("delta_e is NaN".into()));
    }
    let (mut m_min, mut m_max) = (0, m0);
    let (mut m_res, mut e_res) = (m0, e0);
    let mut trace = Vec::new();
    for t in 1..=t_max {
        if m_max - m_min <= 1 {
            break;
        }
        let m_t = (m_min + m_max) / 2;
        let e_t = probe.entropy(block, m_t)?;
        if !e_t.is_finite() {
            return Err(AmpError::Data(format!(
                "entropy {e_t} at block {block}, hidden size {m_t}"
            )));
        }
        let accepted = e_t - e0 < delta_e;
        if accepted {
            m_max = m_t;
            m_res = m_t;
            e_res = e_t;
        } else {
            m_min = m_t;
        }
        trace.push(TraceRow {
            t,
            m_t,
            e_t,
            accepted,
            m_min,
            m_max,
        });
    }
    Ok(BlockSearch {
        block,
        m0,
        m_res,
        e0,
        e_res,
        trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub delta_e: f64,
    pub t_max: usize,
    pub initial_entropy: f64,
    pub final_entropy: f64,
    pub hidden_before: Vec<usize>,
    pub hidden_after: Vec<usize>,
    /// In search order, last block first.
    pub blocks: Vec<BlockSearch>,
}

impl PruneReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        io::read_json(path)
    }

    /// `(block, t, M_t, E_t)` rows across all searches.
    pub fn curve_rows(&self) -> Vec<(usize, usize, usize, f64)> {
        self.blocks
            .iter()
            .flat_map(|b| b.trace.iter().map(move |r| (b.block, r.t, r.m_t, r.e_t)))
            .collect()
    }
}

/// Runs the search over all blocks from last to first, finalizing each
/// block before the next and carrying its entropy forward as the baseline.
pub fn adaptive_search(
    probe: &mut dyn EntropyProbe,
    hidden: &[usize],
    delta_e: f64,
    t_max: usize,
) -> Result<PruneReport> {
    if hidden.is_empty() {
        return Err(AmpError::Parameter("model has no blocks".into()));
    }
    if t_max < 1 {
        return Err(AmpError::Parameter("t_max must be at least 1".into()));
    }
    let initial = probe.baseline()?;
    let mut e0 = initial;
    let mut blocks = Vec::with_capacity(hidden.len());
    let mut after = hidden.to_vec();
    for l in (0..hidden.len()).rev() {
        let s = search_block(probe, l, hidden[l], delta_e, t_max, e0)?;
        if s.m_res == 0 {
            log::warn!("block {l} pruned to zero hidden neurons; its MLP reduces to the residual path");
        }
        log::info!(
            "block {l}: hidden {} -> {} (E {:.6} -> {:.6})",
            s.m0,
            s.m_res,
            s.e0,
            s.e_res
        );
        probe.finalize(l, s.m_res)?;
        after[l] = s.m_res;
        e0 = s.e_res;
        blocks.push(s);
    }
    Ok(PruneReport {
        delta_e,
        t_max,
        initial_entropy: initial,
        final_entropy: e0,
        hidden_before: hidden.to_vec(),
        hidden_after: after,
        blocks,
    })
}

/// Searches every block of `model` against entropies on `dataset` and
/// returns the plan keeping each block's top-ranked neurons.
pub fn adaptive_prune(
    model: &VitModel,
    ranking: &NeuronRanking,
    dataset: &Dataset,
    tau: f64,
    batch_size: usize,
    delta_e: f64,
    t_max: usize,
) -> Result<(PrunePlan, PruneReport)> {
    let mut probe = ModelProbe::new(model, ranking, dataset, tau, batch_size)?;
    let report = adaptive_search(&mut probe, &model.hidden_sizes(), delta_e, t_max)?;
    let plan = PrunePlan::from_sizes(ranking, &report.hidden_after)?;
    Ok((plan, report))
}

/// Kept neurons per block, ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub original_hidden: Vec<usize>,
    pub kept: Vec<Vec<usize>>,
}

impl PrunePlan {
    pub fn keep_all(hidden: &[usize]) -> Self {
        PrunePlan {
            original_hidden: hidden.to_vec(),
            kept: hidden.iter().map(|&m| (0..m).collect()).collect(),
        }
    }

    /// Top `sizes[l]` neurons of each block by `ranking`.
    pub fn from_sizes(ranking: &NeuronRanking, sizes: &[usize]) -> Result<Self> {
        if sizes.len() != ranking.num_blocks() {
            return Err(AmpError::Plan(format!(
                "{} sizes for {} ranked blocks",
                sizes.len(),
                ranking.num_blocks()
            )));
        }
        let mut kept = Vec::with_capacity(sizes.len());
        for (l, &m) in sizes.iter().enumerate() {
            if m > ranking.order[l].len() {
                return Err(AmpError::Plan(format!(
                    "block {l}: keep {m} of {}",
                    ranking.order[l].len()
                )));
            }
            kept.push(ranking.kept(l, m));
        }
        Ok(PrunePlan {
            original_hidden: ranking.order.iter().map(Vec::len).collect(),
            kept,
        })
    }

    /// Same total neuron count as `total`, spread as evenly as possible with
    /// earlier blocks taking the remainder.
    pub fn uniform(ranking: &NeuronRanking, total: usize) -> Result<Self> {
        let l = ranking.num_blocks();
        let sizes: Vec<usize> = (0..l).map(|i| total / l + usize::from(i < total % l)).collect();
        Self::from_sizes(ranking, &sizes)
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.kept.iter().map(Vec::len).collect()
    }

    pub fn total_kept(&self) -> usize {
        self.kept.iter().map(Vec::len).sum()
    }

    /// Activation multipliers realising the plan on the unpruned model.
    pub fn masks(&self) -> Vec<Option<Tensor>> {
        self.kept
            .iter()
            .zip(&self.original_hidden)
            .map(|(k, &m)| {
                let mut t = Tensor::zeros(&[m]);
                for &i in k {
                    t.data_mut()[i] = 1.0;
                }
                Some(t)
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        io::read_json(path)
    }
}

/// Physically removes the fc1 output columns, fc1 bias entries and fc2 input
/// rows of every neuron outside the plan.
pub fn apply_surgery(model: &VitModel, plan: &PrunePlan) -> Result<VitModel> {
    let hidden = model.hidden_sizes();
    if plan.original_hidden != hidden || plan.kept.len() != hidden.len() {
        return Err(AmpError::Plan(format!(
            "plan built for hidden sizes {:?}, model has {hidden:?}",
            plan.original_hidden
        )));
    }
    for (l, (kept, &m)) in plan.kept.iter().zip(&hidden).enumerate() {
        if let Some(&bad) = kept.iter().find(|&&k| k >= m) {
            return Err(AmpError::Plan(format!("block {l}: neuron {bad} out of range for {m}")));
        }
        if kept.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AmpError::Plan(format!(
                "block {l}: kept indices must be unique and ascending"
            )));
        }
    }
    let mut out = model.clone();
    let c = model.config.embed_dim;
    for (block, kept) in out.blocks.iter_mut().zip(&plan.kept) {
        let m = block.fc1.bias.numel();
        let w1 = block.fc1.weight.data();
        let mut fc1_w = Vec::with_capacity(c * kept.len());
        for row in 0..c {
            fc1_w.extend(kept.iter().map(|&k| w1[row * m + k]));
        }
        let fc1_b: Vec<f64> = kept.iter().map(|&k| block.fc1.bias.data()[k]).collect();
        let w2 = block.fc2.weight.data();
        let mut fc2_w = Vec::with_capacity(kept.len() * c);
        for &k in kept {
            fc2_w.extend_from_slice(&w2[k * c..(k + 1) * c]);
        }
        block.fc1.weight = Tensor::new(vec![c, kept.len()], fc1_w)?;
        block.fc1.bias = Tensor::new(vec![kept.len()], fc1_b)?;
        block.fc2.weight = Tensor::new(vec![kept.len(), c], fc2_w)?;
    }
    out.config.per_block_hidden = plan.sizes();
    out.check_shapes()?;
    Ok(out)
}

/// Entropy of `block` at every hidden size in `grid`, others unmasked.
pub fn entropy_curve(
    model: &VitModel,
    ranking: &NeuronRanking,
    dataset: &Dataset,
    tau: f64,
    batch_size: usize,
    block: usize,
    grid: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let mut probe = ModelProbe::new(model, ranking, dataset, tau, batch_size)?;
    grid.iter().map(|&m| Ok((m, probe.entropy(block, m)?))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_probe(e: f64) -> FnProbe<impl FnMut(usize, usize, &BTreeMap<usize, usize>) -> f64> {
        FnProbe::new(vec![8], move |_, _, _| e)
    }

    #[test]
    fn all_reject_trace() {
        let mut p = constant_probe(1.0);
        let s = search_block(&mut p, 0, 8, 0.5, 3, 0.0).unwrap();
        let cands: Vec<usize> = s.trace.iter().map(|r| r.m_t).collect();
        assert_eq!(cands, vec![4, 6, 7]);
        assert!(s.trace.iter().all(|r| !r.accepted));
        assert_eq!(s.m_res, 8);
        assert_eq!(s.e_res, 0.0);
    }

    #[test]
    fn all_accept_trace() {
        let mut p = constant_probe(1.0);
        let s = search_block(&mut p, 0, 8, f64::INFINITY, 3, 0.0).unwrap();
        let cands: Vec<usize> = s.trace.iter().map(|r| r.m_t).collect();
        assert_eq!(cands, vec![4, 2, 1]);
        assert_eq!(s.m_res, 1);
    }

    #[test]
    fn early_exit_when_interval_closes() {
        let mut p = constant_probe(1.0);
        let s = search_block(&mut p, 0, 4, f64::INFINITY, 10, 0.0).unwrap();
        assert_eq!(s.trace.len(), 2);
        assert_eq!(s.m_res, 1);
    }

    #[test]
    fn zero_t_max_is_parameter_error() {
        let mut p = constant_probe(1.0);
        assert!(matches!(
            search_block(&mut p, 0, 8, 0.1, 0, 0.0),
            Err(AmpError::Parameter(_))
        ));
    }

    #[test]
    fn negative_threshold_keeps_everything() {
        let mut p = FnProbe::new(vec![8, 8], |_, m, _| 1.0 - m as f64 / 100.0);
        let r = adaptive_search(&mut p, &[8, 8], -1.0, 6).unwrap();
        assert_eq!(r.hidden_after, vec![8, 8]);
        assert_eq!(r.blocks.iter().map(|b| b.block).collect::<Vec<_>>(), vec![1, 0]);
    }

    #[test]
    fn uniform_plan_spreads_remainder() {
        let ranking = NeuronRanking {
            order: vec![(0..8).collect(); 3],
        };
        assert_eq!(PrunePlan::uniform(&ranking, 10).unwrap().sizes(), vec![4, 3, 3]);
    }

    #[test]
    fn plan_from_sizes_uses_top_ranked() {
        let ranking = NeuronRanking {
            order: vec![vec![3, 1, 0, 2]],
        };
        let p = PrunePlan::from_sizes(&ranking, &[2]).unwrap();
        assert_eq!(p.kept, vec![vec![1, 3]]);
        assert_eq!(p.masks()[0].as_ref().unwrap().data(), &[0.0, 1.0, 0.0, 1.0]);
        assert!(matches!(PrunePlan::from_sizes(&ranking, &[5]), Err(AmpError::Plan(_))));
    }
}
