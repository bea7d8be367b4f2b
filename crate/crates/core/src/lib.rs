//! Joint-sparse recovery for multiple measurement vectors.
//!
//! ℓ2,1-regularized least squares over a dictionary splits into a coupled
//! covariance-fitting step (minimize `g(γ)`, see [`covsolve`]) followed by a
//! per-sample plug-in MMSE estimate (see [`estimate`]). The crate provides
//! both routes, a maximum-likelihood variant of the covariance step, an
//! oracle MMSE baseline, cross-checks between the routes ([`verify`]) and a
//! Monte-Carlo experiment harness ([`harness`]).

pub mod covsolve;
pub mod error;
pub mod estimate;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod verify;

pub use error::{Error, Result};
