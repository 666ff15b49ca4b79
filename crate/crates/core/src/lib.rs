//! Verification laboratory for unique continuation properties of
//! determinants of elliptic-system solutions.
//!
//! The crate builds the explicit closed-form counterexample families
//! (non-diagonal 2D, 1D, diagonal 4D/3D/2D, divergence-type), certifies them
//! on grids, and verifies the positive results and reductions: 1D ODE
//! determinant structure, harmonic conjugates and quotient/multiplier
//! reductions, Beltrami coefficient algebra and chart construction, harmonic
//! homogeneous polynomial classification, order-of-vanishing estimation,
//! squared-distance Taylor expansion, and twisted-Laplacian identities.

pub mod field;
pub mod operators;
pub mod counterexamples;
pub mod conjugates;
pub mod beltrami;
pub mod harmpoly;
pub mod vanishing;
pub mod onedim;
pub mod geom;
pub mod ym;

pub(crate) mod linalg;
