//! Uncertainty estimates for neural-network predictions by regularization
//! variation: refit the MAP with a tiny prediction (or parameter) regularizer
//! and read the epistemic variance off the finite-difference shift, without
//! forming or inverting a Hessian.
//!
//! The crate also carries the dense Laplace baselines the estimates are
//! checked against (exact Hessian, GGN, diagonal and eigen-k), the
//! evaluation metrics, and the synthetic regression tasks.

pub mod data;
pub mod error;
pub mod laplace;
pub mod linalg;
pub mod net;
pub mod objective;
pub mod optim;
pub mod predictive;
pub mod regvar;
pub mod rng;

pub use data::{gen_synthetic, Dataset, Splits, SyntheticTask};
pub use error::{Error, Result};
pub use laplace::{PrecisionEstimate, PrecisionKind};
pub use linalg::SymMatrix;
pub use net::{Activation, LinearModel, MlpArch, Model, ParamVector};
pub use objective::{Batch, Likelihood, LogJointSpec, Prior, Regularizer};
pub use optim::{FitResult, Method, OptimConfig};
pub use predictive::{MetricReport, PredictiveGaussian};
pub use regvar::{RegVarMode, RegVarResult};
