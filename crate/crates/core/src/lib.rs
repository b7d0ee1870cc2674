// `!(x > 0.0)` is used deliberately so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fpf;
pub mod gain;
pub mod harness;
pub mod kde;
pub mod models;
pub mod numerics;
pub mod reference;
pub mod sde;

pub use error::{Error, Result};
