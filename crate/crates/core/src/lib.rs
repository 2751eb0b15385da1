//! Nonlinearity-minimizing linear covariance steering for impulsive
//! stationkeeping on CR3BP halo orbits.

// `!(x > 0.0)` deliberately rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cr3bp;
pub mod error;
pub mod integrate;
pub mod mon;
pub mod pipeline;
pub mod montecarlo;
pub mod report;
pub mod scenario;
pub mod steering;
pub mod stt;
pub mod tensors;

pub use error::{Error, Result};
