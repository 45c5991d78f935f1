//! Information-driven low-thrust trajectory planning for a cislunar observer.
//!
//! The planner maximizes the mutual information between target and observer
//! states and the measurements of an observation window, traded against thrust
//! effort, by successive convexification in the Earth-Moon CRTBP.

// Constants keep all their digits; `!(a < b)` comparisons reject NaN on
// purpose; index loops mirror the block formulas.
#![allow(clippy::excessive_precision, clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod conic;
pub mod discretization;
pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod information;
pub mod integrator;
pub mod measurements;
pub mod scenario;
pub mod scvx;
pub mod subproblem;

pub use error::{Error, Result};
