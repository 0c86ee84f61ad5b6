//! Operator surrogates for stiff semi-explicit index-1 DAEs.
//!
//! A branch–trunk network predicts the slow states over a window; fast and
//! algebraic states are recovered by a differentiable Newton solve of
//! `[f_fast; g] = 0`, so the algebraic constraints hold to solver precision
//! at every emitted point. Gradients flow through the solve by the implicit
//! function theorem.

pub mod linalg;
pub mod dae;
pub mod newton;
pub mod cascade;
pub mod trajectory;
pub mod integrate;
pub mod operator;
pub mod train;
pub mod conformal;
pub mod cli;
