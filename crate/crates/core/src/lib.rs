//! Feature-level style attribution, transfer and retrieval over per-image
//! style vectors and generator activations.

// `!(x > 0.0)` guards are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attribution;
pub mod error;
pub mod evaluation;
pub mod kmeans;
pub mod par;
pub mod retrieval;
pub mod store;
pub mod toy;
pub mod transfer;

pub use error::{Error, Result};
