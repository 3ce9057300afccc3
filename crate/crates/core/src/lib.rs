#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Multi-branch contrastive decoding (MCD) on a seeded toy multimodal
//! decoder, plus the language-bias metrics and dataset tooling used to
//! evaluate it.

pub mod branches;
pub mod dataset;
pub mod decoding;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
