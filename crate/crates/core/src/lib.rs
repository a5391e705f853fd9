//! Nodal discontinuous Galerkin solver core for linear conservation laws on
//! 3D tetrahedral meshes, built around run-time kernel generation and
//! automated tuning.
//!
//! The crate is organised along the solver pipeline:
//!
//! - [`refelem`]: order-N reference tetrahedron (nodes, mass/stiffness/
//!   differentiation matrices, lifting matrix)
//! - [`mesh`]: tetrahedral meshes, face connectivity, geometric factors and
//!   the greedy gather partitioner
//! - [`layout`]: microblocked, padded degree-of-freedom storage
//! - [`fluxdsl`]: typed flux-expression IR with a reference interpreter and
//!   lowering to fused scalar assignments
//! - [`codegen`]: run-time generation of kernel source for the four pipeline
//!   stages, parameterised by a kernel plan
//! - [`executor`]: kernel dialect, compilation, buffers and launch queues
//! - [`autotune`]: benchmark-driven plan selection with a persistent cache
//! - [`physics`]: full semidiscrete operators (Maxwell, advection), RK4
//!   stepping, diagnostics, flop/byte accounting

pub mod autotune;
pub mod codegen;
pub mod error;
pub mod executor;
pub mod fluxdsl;
pub mod layout;
pub mod mesh;
pub mod physics;
pub mod refelem;

pub use error::{Error, Result};
