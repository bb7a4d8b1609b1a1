//! Mine region pairs from unlabeled video and learn an embedding in which
//! temporally linked regions sit close together.

// Validation is written as `!(x > y)` so that NaN fails it.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod ingest;
pub mod jsonl;
pub mod miner;
pub mod model;
pub mod proposals;
pub mod seed;
pub mod synthgen;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
