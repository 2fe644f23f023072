//! Simulation, backward solvers and maximum-principle diagnostics for control
//! problems driven by Brownian motion time-changed by an inverse subordinator.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bsde;
pub mod error;
pub mod forward_sde;
pub mod lq;
pub mod regression;
pub mod rng;
pub mod scalar;
pub mod smp;
pub mod stats;
pub mod subdiffusion;
pub mod subordinator;
pub mod variation;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub use scalar::{Exact, Scalar};
pub use stats::{Estimate, RunningStats};
pub use forward_sde::{CoefficientSet, ControlDomain, ControlPolicy, TrajectoryBundle};
pub use subdiffusion::{ObservableFeatures, SubdiffusionPath};
pub use subordinator::{JumpLaw, JumpSize, SubordinatorSpec};

pub type SubordinatorPath = subordinator::SubordinatorPath<f64>;
pub type InversePath = subordinator::InversePath<f64>;
pub type ExactSubordinatorPath = subordinator::SubordinatorPath<Exact>;
pub type ExactInversePath = subordinator::InversePath<Exact>;
