//! Score-distillation gradient engine.
//!
//! Negative log-likelihood distillation (LD) and SDS gradient seeds, SVD rank
//! weighing of score tensors, mirror-pose and 2×2 grid multi-view steps, all
//! written against small generator and score-model traits. Everything here is
//! allocation-only (`alloc`), no IO; the `ldistill` crate carries transports,
//! file formats and the command line.
#![no_std]
#![forbid(unsafe_code)]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod distill;
pub mod error;
pub mod generator;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod scores;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{ScoreTensor, Shape};
