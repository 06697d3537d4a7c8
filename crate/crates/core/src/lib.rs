//! Offline safe reinforcement learning with return/cost conditioned sequence models.
//!
//! Everything in this crate runs on `core` + `alloc`: trajectory data model,
//! trajectory weighting, an exact tabular oracle for conditioned policies, a small
//! reverse-mode autodiff engine, the causal-transformer policy, twin critics, the
//! constrained trainer, toy environments and the zero-shot evaluation protocol.
//! File formats, reports and the command line live in the `safeseq` crate.
#![no_std]
// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::type_complexity, clippy::needless_range_loop)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod critics;
pub mod envs;
pub mod error;
pub mod eval;
pub mod oracle;
pub mod policy;
pub mod real;
pub mod rng;
pub mod trainer;
pub mod trajectory;
pub mod weighting;

pub use error::{Error, Result};
pub use real::Real;
