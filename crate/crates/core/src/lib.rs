// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bc;
pub mod cvae;
pub mod data;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod nn;
pub mod rng;
pub mod stitch;
mod train;
pub mod value;
pub mod wgan;

pub use error::{Error, Result};
