//! Weight-level text watermarks for small causal language models, with the
//! decoding-time baselines and the robustness evaluation around them.
//!
//! Start with [`policy::WatermarkPolicy`] and [`training::train_cawp`]; the
//! guide in `book/` walks through each module.

// `!(x >= y)` is used on purpose so NaN falls into the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod lm;
pub mod modify;
pub mod policy;
pub mod stats;
pub mod training;

pub use error::{Result, WmError};
