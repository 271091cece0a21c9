//! Spin-boson models with a degenerate atomic ground state on a truncated,
//! quadrature-discretized Fock space, together with the two-step smooth
//! Feshbach renormalization machinery and an exact-diagonalization oracle.

pub mod error;
pub mod feshbach;
pub mod flow;
pub mod fock;
pub mod kernels;
pub mod kv;
pub mod linalg;
pub mod model;
pub mod validate;

pub use error::{Error, Result};
pub use fock::{CMat, C64};
