//! Dimension-adaptive mixture discriminant analysis.
//!
//! A Gaussian classifier is learned on labelled training data observed on a
//! set of `P` variables. Test data may contain classes never seen during
//! training and `Q` additional variables. The discovery phase keeps the
//! learned parameters frozen, estimates only the augmented blocks of the
//! known classes plus the parameters of `H` hidden classes, and picks `H` by
//! BIC. A greedy BIC search selects the relevant variables on top of it.

#[cfg(test)]
macro_rules! assert_close {
    ($a:expr, $b:expr, $tol:expr) => {{
        let (a, b): (f64, f64) = ($a, $b);
        assert!((a - b).abs() <= $tol, "{a} vs {b} (tol {})", $tol);
    }};
}

pub mod discovery;
pub mod edda;
pub mod error;
pub mod gaussian;
pub mod hierarchy;
pub mod io;
pub mod sim;
pub mod varsel;

pub use discovery::{DamdaModel, EmConfig};
pub use edda::{CovStructure, EddaModel};
pub use error::{DamdaError, Result};
pub use gaussian::{GaussianParams, PartitionedCov};
