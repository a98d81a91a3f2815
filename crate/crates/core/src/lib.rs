//! Numerical laboratory for discrete multi-well elastic energies on simplicial
//! meshes and for finite-range lattice spin Hamiltonians.
//!
//! The crate is organised bottom-up:
//!
//! * [`wellalg`]: wells `SO(n)U_j`, rank-one connections, separation constants.
//! * [`mesh`]: Kuhn triangulations with facet geometry and incompatibility checks.
//! * [`energy`]: piecewise-affine deformations, the multi-well energy, laminates.
//! * [`spin`]: cell classification, the spin lemma check, perimeters, partitions.
//! * [`rigidity`]: reduced incompatible fields, curl measures, rigidity ratios.
//! * [`lattice`]: lattice Hamiltonians, antiferromagnetic chains, diagnostics.
//! * [`scaling`]: log-log regressions.
//! * [`harness`]: experiment configuration, sweeps and scaling regressions.

pub mod energy;
pub mod error;
pub mod harness;
pub mod lattice;
pub mod linalg;
pub mod mesh;
pub mod rigidity;
pub mod scaling;
pub mod spin;
pub mod wellalg;

pub use error::{Error, Result};
