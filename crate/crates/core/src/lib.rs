// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the matrix formulas they implement.
#![allow(clippy::needless_range_loop)]

pub mod error;
pub mod igmrf;
pub mod inference;
pub mod io;
pub mod lattice;
pub mod linalg;
pub mod model;
pub mod pc_priors;
pub mod quadrature;

pub use error::{LgcpError, Result};

/// Library version embedded in output bundles.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
