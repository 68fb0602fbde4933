//! Wasserstein distributionally robust federated learning: surrogate losses,
//! local SGD with baselines, distribution-shift attacks and optimal transport
//! utilities.

// `!(x > 0.0)` style checks are kept because they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod data;
pub mod error;
pub mod fl_engine;
pub mod math;
pub mod metrics_eval;
pub mod model;
pub mod ot;
pub mod surrogate;

pub use attacks::AttackConfig;
pub use data::{ClientDataset, FederationData, Label, LabeledExample};
pub use error::{Error, Result};
pub use fl_engine::{AlgorithmVariant, RoundLog, TrainConfig, WeightsMode};
pub use math::{derive_stream, project_simplex, ProbabilityVector, RngStream};
pub use model::{LossKind, ModelParams, ModelSpec};
pub use ot::{Coupling, DiscreteDistribution, OtConfig};
pub use surrogate::{Kappa, SurrogateConfig, WorstCasePoint};
