//! Logit-regularization robustness toolkit: a small dense-tensor autodiff
//! engine, compact classifiers, L-infinity attacks (FGSM, PGD, SPSA), the
//! logit-regularization training objectives built on them, and an evaluation
//! harness for white-box, black-box, and gradient-masking measurements.
//!
//! Everything is deterministic: given the same configs, dataset, and master
//! seed, training and evaluation reproduce bit-identically.

pub mod attacks;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod models;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod training;

pub use attacks::{AttackKind, AttackOutcome, PassCounts, PgdInit, PgdOptions, ThreatModel};
pub use data::{
    Batch, Dataset, LabelDistribution, MixConfig, MixMode, Split, SyntheticKind, SyntheticSpec,
};
pub use error::{Error, Result};
pub use evaluation::{
    AttackSpec, LogitStats, MaskingProbe, RobustnessReport, SpsaSpec, TransferMatrix,
};
pub use graph::{finite_difference_gradient, Gradients, NodeId, Tape};
pub use models::{Architecture, ForwardPass, ModelConfig, ModelParams};
pub use objectives::{DefenseKind, LossBreakdown, ObjectiveConfig, PairingWeightMode};
pub use tensor::Tensor;
pub use training::{EpochRecord, OptimizerState, TrainSpec, TrainingConfig, TrainingLog};
