//! Structure-preserving integrators on the homogeneous space S² ≅ SO(3)/SO(2).
//!
//! Variational problems on the sphere are lifted to SO(3) and constrained back
//! to it through the nonholonomic velocity constraint φ(η) = η·x₀ = 0. The
//! [`integrator`] module advances that constrained system with implicit
//! partitioned Runge-Kutta Munthe-Kaas steps built from Lobatto tableaux
//! ([`tableau`]) and a retraction with its trivialized tangent maps
//! ([`retraction`]). Two mechanical systems are bundled ([`systems`]): the
//! spherical pendulum and the spherical Kepler problem. [`reference`] supplies
//! high-accuracy solutions of the continuous equations for convergence and
//! conservation studies, and [`experiments`] drives the CSV-producing studies
//! behind the `homint` command-line tool.

pub mod cli;
pub mod experiments;
pub mod integrator;
pub mod reference;
pub mod retraction;
pub mod so3;
pub mod sphere;
pub mod systems;
pub mod tableau;
