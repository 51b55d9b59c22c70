//! Noise-aware masking (NAM) and template-based caption diversity (TDE) for
//! text-to-image person retrieval, in a self-contained dual-encoder
//! training and evaluation pipeline over synthetic data.

// `!(x > 0.0)` is used on purpose: unlike `x <= 0.0` it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nam;
pub mod numerics;
pub mod tde;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
