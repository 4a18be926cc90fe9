//! Weighted Monge-Ampere measures on toric data.
//!
//! Everything happens in logarithmic torus coordinates: a positively curved
//! torus-invariant metric is a convex function `phi` on R^n, its moment map
//! is the gradient, and the image closure is a lattice polytope `P`. The
//! crate computes, at desk scale (n = 1, 2):
//!
//! - exact lattice polytope geometry (vertices, volumes, lattice points,
//!   closed-form integrals of `p^beta * e^(<xi, p>)`),
//! - Monge-Ampere measures of max-affine and log-sum-exp potentials,
//!   weighted by a density `g` composed with the moment map, together with
//!   envelopes, superlevel masses, and sharpening families,
//! - Aubin-Yau style energies, the canonical-measure functional, and the
//!   modified Ding and Mabuchi functionals driven by a vector-field weight,
//! - semi-discrete optimal transport with exact Laguerre cells (damped
//!   Newton with a coordinate-ascent fallback) solving `MA_g(phi) = mu`,
//! - Futaki-type invariants, their quantized counterparts, and the soliton
//!   vector field as the critical point of `xi -> int_P e^(<p, xi>) dp`,
//! - Bergman/Hilbert quantization: Fubini-Study and Hilbert maps, weighted
//!   Bergman kernels, spectral measures, quantized energies and geodesics,
//!   Donaldson-type iteration, and quantized solitons.

pub mod energy;
pub mod error;
pub mod expdd;
pub mod gweight;
pub mod invariants;
pub mod measure;
pub mod polytope;
pub mod potential;
pub mod quantization;
pub mod quadrature;
pub mod rational;
pub mod transport;

pub use error::{Error, Result};
