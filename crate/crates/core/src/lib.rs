//! Noisy-label sample selection from learning dynamics.
//!
//! Each training instance's per-epoch correctness is turned into a
//! difficulty score; a two-component Weibull mixture separates the scores
//! and instances below the noisy component's scale are kept for the next
//! round of training.

// `!(x > 0.0)` style checks deliberately reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod evaluation;
pub mod id;
pub mod mixture;
pub mod predlog;
pub mod selection;
pub mod trainer;

pub use id::InstanceId;
