//! Tomographic self-calibration toolkit.
//!
//! Reconstructs a 2-D image together with per-angle-block fan-beam geometry
//! parameters (source-to-object distance, angle offsets) from projection data
//! by accelerated alternating minimization. The linear image subproblem is
//! solved by hybrid LSQR with weighted-GCV Tikhonov regularization on the
//! projected bidiagonal system; the small nonlinear geometry subproblems are
//! solved by derivative-free bound-constrained search.

pub mod direct_reg;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod krylov;
pub mod nls;
pub mod outer;
pub mod phantom;
pub mod projector;

pub use error::{Error, Result};
