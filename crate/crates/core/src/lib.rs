//! Fair representation fine-tuning with distance-covariance penalties.
//!
//! A DenseNet-style representation network is trained jointly with a
//! classifier head under cross-entropy plus (conditional) distance-covariance
//! penalties against sensitive attributes. The [`metrics`] module audits the
//! result with TPR-gap and MCDP fairness metrics.

pub mod autodiff;
pub mod data;
pub mod dependence;
pub mod error;
pub mod metrics;
pub mod network;
pub mod training;

pub use error::{Error, Result};
