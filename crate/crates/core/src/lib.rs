//! Conditional entropy shaping (CES) for group-relative policy-gradient
//! training, on a tiny autoregressive policy with exact gradients.
//!
//! The differentiable core (`policy`, `shaping`, `objective`, `optim`) is
//! generic over [`Scalar`]; the trainer, evaluation harness and CLI run on
//! `f64` through the aliases below.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod objective;
pub mod optim;
pub mod policy;
pub mod records;
pub mod replay;
pub mod rollout;
pub mod scalar;
pub mod shaping;
pub mod streams;
pub mod tasks;
pub mod trainer;

pub use error::{CesError, Result};
pub use scalar::Scalar;

pub type Params = policy::PolicyParams<f64>;
pub type Params32 = policy::PolicyParams<f32>;
pub type Distribution = policy::TokenDistribution<f64>;
pub type Batch = rollout::GroupBatch<f64>;
pub type Trace = rollout::ResponseTrace<f64>;
pub type Plan = shaping::ShapingPlan<f64>;
pub type Adam = optim::AdamState<f64>;
