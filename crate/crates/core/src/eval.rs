//! kNN evaluation, cost accounting and throughput timing.

use std::cmp::Ordering;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{AmpError, Result};
use crate::io;
use crate::model::{ModelConfig, VitModel};
use crate::pruner::PrunePlan;
use crate::tensor::Tensor;

pub const DEFAULT_K: usize = 20;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Unit-norm class-token features with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split_tag: String,
}

impl FeatureBank {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.features.data()[i * d..(i + 1) * d]
    }
}

pub fn extract_features(model: &VitModel, dataset: &Dataset, batch_size: usize) -> Result<FeatureBank> {
    let labels = dataset
        .labels
        .clone()
        .ok_or_else(|| AmpError::Data("feature extraction needs a labelled dataset".into()))?;
    let c = model.config.embed_dim;
    let mut data = Vec::with_capacity(dataset.len() * c);
    for batch in dataset.batches(batch_size) {
        let (z, _) = model.embed(&batch.images, &[])?;
        for (r, row) in z.data().chunks(c).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(AmpError::NumericDomain(format!(
                    "zero-norm feature for sample {}",
                    batch.indices[r]
                )));
            }
            data.extend(row.iter().map(|v| v / norm));
        }
    }
    Ok(FeatureBank {
        features: Tensor::new(vec![dataset.len(), c], data)?,
        labels,
        num_classes: dataset.num_classes,
        split_tag: dataset.source_tag.clone(),
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Higher similarity first; equal similarity prefers the lower index.
fn neighbour_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnResult {
    pub top1: f64,
    pub predictions: Vec<usize>,
    pub per_class: Vec<ClassAccuracy>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub correct: usize,
    pub total: usize,
}

/// Similarity-weighted vote among the `k` most similar training features,
/// each neighbour contributing `exp(sim / temperature)` to its class. Vote
/// ties go to the lower class index.
pub fn knn_classify(train: &FeatureBank, test: &FeatureBank, k: usize, temperature: f64) -> Result<KnnResult> {
    if train.is_empty() || test.is_empty() {
        return Err(AmpError::Parameter("kNN needs non-empty banks".into()));
    }
    if k == 0 || k > train.len() {
        return Err(AmpError::Parameter(format!("k = {k} outside [1, {}]", train.len())));
    }
    if temperature <= 0.0 {
        return Err(AmpError::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if train.dim() != test.dim() {
        return Err(AmpError::Dimension {
            op: "knn_classify",
            lhs: train.features.shape().to_vec(),
            rhs: test.features.shape().to_vec(),
        });
    }
    let classes = train.num_classes.max(test.num_classes);
    let mut predictions = Vec::with_capacity(test.len());
    let mut sims: Vec<(f64, usize)> = Vec::with_capacity(train.len());
    for i in 0..test.len() {
        let q = test.row(i);
        sims.clear();
        sims.extend((0..train.len()).map(|j| (dot(q, train.row(j)), j)));
        if k < sims.len() {
            sims.select_nth_unstable_by(k - 1, neighbour_order);
        }
        let top = &mut sims[..k];
        top.sort_by(neighbour_order);
        let mut votes = vec![0.0; classes];
        for &(s, j) in top.iter() {
            votes[train.labels[j]] += (s / temperature).exp();
        }
        predictions.push(argmax_low(&votes));
    }
    let mut per_class: Vec<ClassAccuracy> = (0..classes)
        .map(|class| ClassAccuracy {
            class,
            correct: 0,
            total: 0,
        })
        .collect();
    for (&p, &y) in predictions.iter().zip(&test.labels) {
        per_class[y].total += 1;
        if p == y {
            per_class[y].correct += 1;
        }
    }
    let correct: usize = per_class.iter().map(|c| c.correct).sum();
    Ok(KnnResult {
        top1: 100.0 * correct as f64 / test.len() as f64,
        predictions,
        per_class,
    })
}

fn argmax_low(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub batch_size: usize,
    pub trial_seconds: Vec<f64>,
    pub median_seconds: f64,
    pub images_per_second: f64,
}

/// Times `trials` forward passes of one batch after a single warmup pass.
pub fn throughput(model: &VitModel, images: &Tensor, trials: usize) -> Result<Throughput> {
    if trials < 3 {
        return Err(AmpError::Parameter(format!("need at least 3 trials, got {trials}")));
    }
    model.embed(images, &[])?;
    let mut times = Vec::with_capacity(trials);
    for _ in 0..trials {
        let start = Instant::now();
        model.embed(images, &[])?;
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(summarize(images.shape()[0], times))
}

/// Alternates trials between two models so drift affects both equally.
pub fn paired_throughput(
    a: &VitModel,
    b: &VitModel,
    images: &Tensor,
    trials: usize,
) -> Result<(Throughput, Throughput)> {
    if trials < 3 {
        return Err(AmpError::Parameter(format!("need at least 3 trials, got {trials}")));
    }
    a.embed(images, &[])?;
    b.embed(images, &[])?;
    let (mut ta, mut tb) = (Vec::with_capacity(trials), Vec::with_capacity(trials));
    for _ in 0..trials {
        let start = Instant::now();
        a.embed(images, &[])?;
        ta.push(start.elapsed().as_secs_f64());
        let start = Instant::now();
        b.embed(images, &[])?;
        tb.push(start.elapsed().as_secs_f64());
    }
    let n = images.shape()[0];
    Ok((summarize(n, ta), summarize(n, tb)))
}

fn summarize(batch_size: usize, trial_seconds: Vec<f64>) -> Throughput {
    let mut sorted = trial_seconds.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    Throughput {
        batch_size,
        trial_seconds,
        median_seconds: median,
        images_per_second: batch_size as f64 / median,
    }
}

/// Parameters and per-image FLOPs removed by a plan:
/// `(M₀ − M) · (2C + 1)` and `(M₀ − M) · 4 · N · C` per block.
pub fn closed_form_reduction(config: &ModelConfig, plan: &PrunePlan, image_size: usize) -> (usize, u64) {
    let c = config.embed_dim;
    let side = image_size / config.patch_size;
    let n = (side * side + 1) as u64;
    let removed: usize = plan
        .original_hidden
        .iter()
        .zip(plan.sizes())
        .map(|(&m0, m)| m0 - m)
        .sum();
    (removed * (2 * c + 1), removed as u64 * 4 * n * c as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub knn_top1: f64,
    pub knn_k: usize,
    pub knn_temperature: f64,
    pub params: usize,
    pub mlp_params: usize,
    pub flops: u64,
    pub throughput: Option<Throughput>,
    pub hidden_sizes: Vec<usize>,
    pub config: ModelConfig,
    pub per_class: Vec<ClassAccuracy>,
}

impl EvalReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        io::read_json(path)
    }

    pub fn write_per_class_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .per_class
            .iter()
            .map(|c| {
                let acc = if c.total == 0 {
                    0.0
                } else {
                    100.0 * c.correct as f64 / c.total as f64
                };
                vec![
                    c.class.to_string(),
                    c.correct.to_string(),
                    c.total.to_string(),
                    format!("{acc:.4}"),
                ]
            })
            .collect();
        io::write_csv(path, &["class", "correct", "total", "accuracy"], &rows)
    }
}

/// kNN accuracy plus cost accounting for one model.
pub fn evaluate(
    label: &str,
    model: &VitModel,
    train: &Dataset,
    test: &Dataset,
    k: usize,
    temperature: f64,
    batch_size: usize,
) -> Result<EvalReport> {
    let train_bank = extract_features(model, train, batch_size)?;
    let test_bank = extract_features(model, test, batch_size)?;
    let knn = knn_classify(&train_bank, &test_bank, k, temperature)?;
    Ok(EvalReport {
        label: label.to_string(),
        knn_top1: knn.top1,
        knn_k: k,
        knn_temperature: temperature,
        params: model.count_params(),
        mlp_params: model.count_mlp_params(),
        flops: model.count_flops(model.config.image_size),
        throughput: None,
        hidden_sizes: model.hidden_sizes(),
        config: model.config.clone(),
        per_class: knn.per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(rows: Vec<Vec<f64>>, labels: Vec<usize>) -> FeatureBank {
        let d = rows[0].len();
        let n = rows.len();
        let data = rows
            .into_iter()
            .flat_map(|r| {
                let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.into_iter().map(move |v| v / norm)
            })
            .collect();
        let num_classes = labels.iter().max().unwrap() + 1;
        FeatureBank {
            features: Tensor::new(vec![n, d], data).unwrap(),
            labels,
            num_classes,
            split_tag: "t".into(),
        }
    }

    #[test]
    fn self_match_with_k1_is_perfect() {
        let b = bank(vec![vec![1.0, 0.2], vec![0.1, 1.0], vec![-1.0, 0.3]], vec![0, 1, 2]);
        assert_eq!(knn_classify(&b, &b, 1, 0.07).unwrap().top1, 100.0);
    }

    #[test]
    fn separated_clusters_are_perfect() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..5 {
            rows.push(vec![1.0, 0.01 * i as f64]);
            labels.push(0);
            rows.push(vec![-1.0, 0.01 * i as f64]);
            labels.push(1);
        }
        let b = bank(rows, labels);
        for k in 1..=5 {
            assert_eq!(knn_classify(&b, &b, k, 0.07).unwrap().top1, 100.0);
        }
    }

    #[test]
    fn invalid_k_and_empty_banks() {
        let b = bank(vec![vec![1.0, 0.0]], vec![0]);
        assert!(matches!(knn_classify(&b, &b, 2, 0.07), Err(AmpError::Parameter(_))));
        let mut e = b.clone();
        e.labels.clear();
        e.features = Tensor::zeros(&[0, 2]);
        assert!(matches!(knn_classify(&e, &b, 1, 0.07), Err(AmpError::Parameter(_))));
    }

    #[test]
    fn vote_tie_goes_to_lower_class() {
        let train = bank(vec![vec![1.0, 1.0], vec![1.0, -1.0]], vec![1, 0]);
        let test = bank(vec![vec![1.0, 0.0]], vec![0]);
        assert_eq!(knn_classify(&train, &test, 2, 0.07).unwrap().predictions, vec![0]);
    }

    #[test]
    fn median_of_odd_and_even_trials() {
        assert_eq!(summarize(2, vec![3.0, 1.0, 2.0]).median_seconds, 2.0);
        assert_eq!(summarize(2, vec![4.0, 1.0, 2.0, 3.0]).median_seconds, 2.5);
    }
}
