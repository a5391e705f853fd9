//! Concrete linear systems (electromagnetics, scalar transport), benchmark
//! cases with closed-form solutions, a dense host reference for the
//! semi-discrete operator, and the kernel-driven time-stepping solver.

mod cases;
mod oracle;
mod solver;
mod system;

pub use cases::{Case, CaseKind};
pub use oracle::{dense_rhs, dense_rhs_with, flat_index, flux_values};
pub use solver::{PlanSet, Solver, SolverConfig};
pub use system::SystemDefinition;
