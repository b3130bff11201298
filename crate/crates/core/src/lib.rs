//! Radial solutions of the biharmonic Schrödinger equation
//! `Δ²u + V(|x|) u = f(|x|, u)` in ℝᴺ, `N ≥ 5`.
//!
//! The solver follows the descent flow `∂ₜφ = A(φ) - φ` of the energy
//! `I(u) = ½‖u‖² - ∫F(x, u)` and locates critical points on the boundary of
//! the basin of attraction of the origin. Bisection along rays in the cones
//! `K = {u ≥ 0}` and `-K` yields a positive and a negative solution; a second
//! bisection across a path joining the two cones, with trajectories labelled
//! by the Moreau cone distances, yields a sign-changing one.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod banded;
pub mod config;
pub mod error;
pub mod export;
pub mod flow;
pub mod model;
pub mod moreau;
pub mod radial;
pub mod run;
pub mod sampling;
pub mod solver;

pub use error::{Error, Result};
pub use model::{Problem, PotentialSpec, RadialProfile, TermSpec};
pub use radial::Field;
