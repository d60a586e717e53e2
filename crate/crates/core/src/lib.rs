// NaN must fail range checks, so `!(x > 0.0)` is deliberate
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod features;
pub mod flow;
pub mod harness;
pub mod metrics;
pub mod policy;
pub mod regularizers;
pub mod safety_mdp;
pub mod value;

pub use error::{MeanflowError, Result};
