//! Adaptive MLP pruning for vision transformers at desk scale.
//!
//! The pipeline: score every MLP hidden neuron with a first-order Taylor
//! estimate of a label-free entropy criterion ([`importance`]), binary-search
//! each block's hidden size from the last block to the first ([`pruner`]),
//! physically remove the dropped neurons, then recover accuracy by
//! distilling from the unpruned model ([`distill`]).

pub mod autodiff;
pub mod checkpoint;
pub mod criterion;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod importance;
pub mod io;
pub mod model;
pub mod optim;
pub mod pruner;
pub mod teacher;
pub mod tensor;

pub use autodiff::{CaptureHandle, Tape, Var};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use criterion::{CriterionKind, EntropyRecord};
pub use data::Dataset;
pub use distill::{DistillConfig, LossRecord};
pub use error::{AmpError, Result};
pub use eval::{EvalReport, FeatureBank};
pub use importance::{Aggregation, ImportanceTable, NeuronRanking};
pub use model::{ForwardOptions, ForwardRecord, ModelConfig, VitModel};
pub use pruner::{PrunePlan, PruneReport};
pub use tensor::Tensor;
