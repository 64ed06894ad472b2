//! Spectral Galerkin machinery for the 3D stochastic Navier-Stokes equations
//! on the torus with diagonal, finitely degenerate noise, together with the
//! diagnostics built on top of it: Feynman-Kac weighted semigroups, tangent
//! and Jacobian flows, Malliavin matrices, bracket span certificates,
//! coupling-based mixing curves and a staged steering controller.
//!
//! Velocity fields are stored as per-mode coefficient pairs in a fixed
//! orthonormal basis of each plane `k⊥`, so every representable field is
//! divergence free by construction. All norms are coefficient-space norms
//! with respect to the L2-normalized trigonometric basis.

pub mod dynamics;
pub mod ergodicity;
pub mod field;
pub mod hormander;
pub mod lattice;
pub mod noise;
pub mod nonlinearity;
pub mod tangent;

pub(crate) mod vec3;

pub use dynamics::{simulate, RunRecord, SimConfig};
pub use field::{GalerkinField, SobolevExponent};
pub use lattice::{enumerate_modes, perp_basis, project_perp, ModeIndex, ModeSet, PerpBasis};
pub use noise::{build_covariance, CovarianceOperator, NoiseStream};
pub use nonlinearity::{bilinear, pair_interaction, InteractionTable, PairInteraction};
