//! Runner, score-backend client, file formats and command line for
//! `ldistill-core`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod echo;
pub mod error;
pub mod gradcheck;
pub mod ppm;
pub mod protocol;
pub mod report;
pub mod runner;

pub use error::RunError;
