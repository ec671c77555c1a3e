// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

mod bytes;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod net;
pub mod optim;
pub mod pooling;
pub mod probes;
pub mod rng;
pub mod robustness;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
