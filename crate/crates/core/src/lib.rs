//! Joint aleatoric (Monte Carlo dropout) and epistemic (virtual-outlier
//! energy) uncertainty estimation for small classifiers, plus the OOD
//! evaluation suite used to score them.

// `!(x > 0.0)` style checks deliberately reject NaN alongside bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod mcdropout;
pub mod metrics;
pub mod mlp;
pub mod numerics;
pub mod vos;

pub use error::{Error, Result};
