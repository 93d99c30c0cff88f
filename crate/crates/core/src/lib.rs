//! Loss-aware weight quantization with backtracking search.
//!
//! The crate provides a small reverse-mode autodiff engine ([`autodiff`]),
//! fixed-point grids and scaled projection ([`quantizer`]), a diagonal
//! curvature estimate ([`curvature`]), the LAQ, BLAQ and full-precision
//! update rules ([`optimizers`]), zig-zag diagnostics ([`metrics`]) and
//! numeric checks of the convergence results on quadratics ([`theory`]).

pub mod autodiff;
pub mod curvature;
pub mod metrics;
pub mod optimizers;
pub mod quantizer;
pub mod tensor;
pub mod theory;
