//! Run configuration: one JSON document driving every stage.

use std::path::{Path, PathBuf};

use amp_core::data::SynthStyle;
use amp_core::importance::Aggregation;
use amp_core::teacher::TeacherObjective;
use amp_core::{CriterionKind, DistillConfig, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
}

impl ModelSection {
    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig::new(
            self.image_size,
            self.patch_size,
            self.embed_dim,
            self.num_blocks,
            self.num_heads,
            self.mlp_hidden,
        )
        .with_classes(num_classes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSection {
    Synthetic {
        num_classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        train_seed: u64,
        test_seed: u64,
        #[serde(default)]
        style: SynthStyle,
    },
    ImageDir {
        train_dir: PathBuf,
        test_dir: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    /// Load this checkpoint instead of training.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub train: DistillConfig,
    pub objective: TeacherObjective,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionChoice {
    Entropy,
    CrossEntropy,
}

impl CriterionChoice {
    pub fn short(self) -> &'static str {
        match self {
            CriterionChoice::Entropy => "entropy",
            CriterionChoice::CrossEntropy => "xent",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriterionSection {
    pub kind: CriterionChoice,
    pub tau: f64,
    pub delta_e: f64,
    pub t_max: usize,
    pub prune_set_size: usize,
    pub batch_size: usize,
    pub aggregation: Aggregation,
}

impl CriterionSection {
    pub fn criterion(&self) -> CriterionKind {
        match self.kind {
            CriterionChoice::Entropy => CriterionKind::Entropy { tau: self.tau },
            CriterionChoice::CrossEntropy => CriterionKind::CrossEntropy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub k: usize,
    pub temperature: f64,
    pub batch_size: usize,
    pub throughput_batch: usize,
    pub throughput_trials: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub delta_e: Vec<f64>,
    /// Hidden sizes evaluated by the dense entropy curve.
    pub dense_grid: Vec<usize>,
}

/// Seeds derived from one master value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub master: u64,
}

impl Seeds {
    pub fn init(&self) -> u64 {
        self.master
    }

    pub fn teacher_shuffle(&self) -> u64 {
        self.master.wrapping_add(1_000)
    }

    pub fn prune_sample(&self) -> u64 {
        self.master.wrapping_add(2_000)
    }

    pub fn distill_shuffle(&self) -> u64 {
        self.master.wrapping_add(3_000)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub teacher: TeacherSection,
    pub criterion: CriterionSection,
    pub distill: DistillConfig,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub seeds: Seeds,
    pub out: PathBuf,
}

impl Default for RunConfig {
    /// The bundled toy profile.
    fn default() -> Self {
        let seeds = Seeds { master: 0 };
        let toy_train = DistillConfig {
            epochs: 10,
            warmup_epochs: 1,
            base_lr: 4e-3,
            min_lr: 1e-6,
            batch_size: 32,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.95,
            seed: seeds.teacher_shuffle(),
        };
        RunConfig {
            model: ModelSection {
                image_size: 32,
                patch_size: 16,
                embed_dim: 64,
                num_blocks: 4,
                num_heads: 4,
                mlp_hidden: 256,
            },
            data: DataSection::Synthetic {
                num_classes: 8,
                train_per_class: 250,
                test_per_class: 50,
                train_seed: 1,
                test_seed: 2,
                style: SynthStyle::default(),
            },
            teacher: TeacherSection {
                checkpoint: None,
                train: toy_train.clone(),
                objective: TeacherObjective {
                    spread_weight: 1.0,
                    tau: 1.0 / 15.0,
                },
            },
            criterion: CriterionSection {
                kind: CriterionChoice::Entropy,
                tau: 1.0 / 15.0,
                delta_e: 1.778e-3,
                t_max: 6,
                prune_set_size: 512,
                batch_size: 64,
                aggregation: Aggregation::BatchMean,
            },
            distill: DistillConfig {
                base_lr: 2e-3,
                seed: seeds.distill_shuffle(),
                ..toy_train
            },
            eval: EvalSection {
                k: amp_core::eval::DEFAULT_K,
                temperature: amp_core::eval::DEFAULT_TEMPERATURE,
                batch_size: 100,
                throughput_batch: 64,
                throughput_trials: 7,
            },
            sweep: SweepSection {
                delta_e: vec![1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1],
                dense_grid: (1..=16).map(|i| i * 16).collect(),
            },
            seeds,
            out: PathBuf::from("runs/toy"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.data {
            DataSection::Synthetic { num_classes, .. } => Some(*num_classes),
            DataSection::ImageDir { .. } => None,
        }
    }

    /// Cross-field checks that do not need the data on disk.
    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: amp_core::AmpError| CliError::Config(e.to_string());
        self.model
            .model_config(self.num_classes().unwrap_or(1))
            .validate()
            .map_err(cfg)?;
        self.teacher.train.validate().map_err(cfg)?;
        self.distill.validate().map_err(cfg)?;
        let c = &self.criterion;
        if !(c.tau > 0.0 && c.tau.is_finite()) {
            return Err(CliError::Config(format!(
                "criterion.tau must be positive, got {}",
                c.tau
            )));
        }
        if c.delta_e.is_nan() {
            return Err(CliError::Config("criterion.delta_e is NaN".into()));
        }
        if c.t_max < 1 {
            return Err(CliError::Config("criterion.t_max must be at least 1".into()));
        }
        if c.batch_size < 2 {
            return Err(CliError::Config("criterion.batch_size must be at least 2".into()));
        }
        if c.prune_set_size < c.batch_size {
            return Err(CliError::Config(format!(
                "criterion.prune_set_size {} is below criterion.batch_size {}",
                c.prune_set_size, c.batch_size
            )));
        }
        if let DataSection::Synthetic {
            num_classes,
            train_per_class,
            test_per_class,
            ..
        } = &self.data
        {
            if *num_classes == 0 || *train_per_class == 0 || *test_per_class == 0 {
                return Err(CliError::Config("synthetic data sizes must be positive".into()));
            }
            let train = num_classes * train_per_class;
            if c.prune_set_size > train {
                return Err(CliError::Config(format!(
                    "criterion.prune_set_size {} exceeds the {train} training samples",
                    c.prune_set_size
                )));
            }
            if self.eval.k > train {
                return Err(CliError::Config(format!(
                    "eval.k {} exceeds the {train} training samples",
                    self.eval.k
                )));
            }
        }
        if self.eval.k == 0 || !(self.eval.temperature > 0.0) {
            return Err(CliError::Config("eval.k and eval.temperature must be positive".into()));
        }
        if self.eval.batch_size == 0 || self.eval.throughput_batch == 0 {
            return Err(CliError::Config("eval batch sizes must be positive".into()));
        }
        if self.eval.throughput_trials < 3 {
            return Err(CliError::Config("eval.throughput_trials must be at least 3".into()));
        }
        if self
            .sweep
            .dense_grid
            .iter()
            .any(|&m| m == 0 || m > self.model.mlp_hidden)
        {
            return Err(CliError::Config(format!(
                "sweep.dense_grid entries must lie in [1, {}]",
                self.model.mlp_hidden
            )));
        }
        Ok(())
    }
}
