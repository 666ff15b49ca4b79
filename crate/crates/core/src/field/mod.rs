//! Exact symbolic expressions and sampled grid fields, with differentiation,
//! quadrature, and cross-checking between the two representations.

mod expr;
mod grid;
pub(crate) mod quad;

pub use expr::{Expr, Poly1, AXIS_INTEGRAL_TOL, MAX_VARS};
pub use grid::{
    fd_crosscheck, log_log_slope, sample, ConvergenceRecord, DomainBox, FieldError, GridField,
    MatrixField,
};
